"""Desk-scale conditional adversarial trainer over procedurally generated
shape images.

A tiny fully-connected generator maps (edge map, blurred color map, noise)
to an image; a discriminator scores (edge map, color map, image) triples.
Training alternates one ascent step on the discriminator objective with one
descent step on the generator's fake term plus the weighted color/shape
distances.  The color term trains through a soft (Gaussian-kernel)
histogram so it is differentiable, while the recorded color loss is the
hard histogram KL.  Everything is a pure function of the config seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .errors import DimMismatch, DivergenceDetected, StaleCache
from .imageops import Image, blur_average, color_histogram, edge_map, save_png
from .losses import LOG_FLOOR, LossWeights, color_loss, gan_objective

ACTIVATIONS = ("tanh", "sigmoid", "identity")

# trainer weight init; small enough that the first tanh layer starts unsaturated
INIT_SCALE = 0.05

# seed-stream tags
_TAG_G_INIT, _TAG_D_INIT, _TAG_DATA, _TAG_NOISE, _TAG_HOLDOUT, _TAG_HOLDOUT_NOISE = range(1, 7)


@dataclass
class Layer:
    """One affine layer: out = activation(weights @ x + bias)."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DimMismatch(
                f"layer shapes disagree: W{self.weights.shape} b{self.bias.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ValueError("layer parameters must be finite")


@dataclass
class TinyNet:
    """A chain of Layers; consecutive dimensions must match."""

    layers: list[Layer]

    def __post_init__(self):
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.weights.shape[1] != prev.weights.shape[0]:
                raise DimMismatch(
                    f"layer chain broken: {prev.weights.shape} -> {cur.weights.shape}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weights.shape[0]


class ForwardCache(NamedTuple):
    inputs: list
    preacts: list
    outputs: list
    param_ids: list
    single: bool


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return expit(z)
    return z


def _activation_slope(name: str, out: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - out * out
    if name == "sigmoid":
        return out * (1.0 - out)
    return np.ones_like(out)


def forward(net: TinyNet, x) -> tuple[np.ndarray, ForwardCache]:
    """Run the net; returns the output and the cache backward() needs."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.shape[1] != net.in_dim:
        raise DimMismatch(f"input dim {arr.shape[1]} != net input dim {net.in_dim}")
    inputs, preacts, outputs = [], [], []
    current = arr
    for layer in net.layers:
        inputs.append(current)
        z = current @ layer.weights.T + layer.bias
        current = _activate(layer.activation, z)
        preacts.append(z)
        outputs.append(current)
    ids = [(id(layer.weights), id(layer.bias)) for layer in net.layers]
    out = current[0] if single else current
    return out, ForwardCache(inputs, preacts, outputs, ids, single)


def backward(net: TinyNet, cache: ForwardCache, loss_grad):
    """Reverse-mode gradients of the cached forward pass.

    loss_grad is dL/d(output); returns ([(dW, db) per layer], dL/d(input)),
    each summed over batch rows.  Raises StaleCache when the cache does not
    belong to the net's current parameter arrays.
    """
    current_ids = [(id(layer.weights), id(layer.bias)) for layer in net.layers]
    if cache.param_ids != current_ids or len(cache.inputs) != len(net.layers):
        raise StaleCache("forward cache does not match the net's current parameters")
    grad = np.asarray(loss_grad, dtype=np.float64)
    if cache.single:
        grad = grad[None, :]
    if grad.shape != cache.outputs[-1].shape:
        raise DimMismatch(
            f"loss_grad shape {grad.shape} != output shape {cache.outputs[-1].shape}")
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        dz = grad * _activation_slope(layer.activation, cache.outputs[i])
        grads[i] = (dz.T @ cache.inputs[i], dz.sum(axis=0))
        grad = dz @ layer.weights
    input_grad = grad[0] if cache.single else grad
    return grads, input_grad


def init_net(dims, activations, rng: np.random.Generator, scale: float = 0.1) -> TinyNet:
    """Gaussian(0, scale) weights, zero biases, for dims [in, h1, ..., out]."""
    layers = []
    for i, act in enumerate(activations):
        layers.append(Layer(
            weights=rng.standard_normal((dims[i + 1], dims[i])) * scale,
            bias=np.zeros(dims[i + 1]),
            activation=act,
        ))
    return TinyNet(layers)


class ProceduralSample(NamedTuple):
    image: Image
    shape_map: Image
    color_map: Image
    mask: Image


def gen_procedural_sample(seed: int, side: int) -> ProceduralSample:
    """Render a random filled convex polygon and its conditioning maps.

    The polygon (3-6 vertices on a jittered ellipse) gets a random fill
    color over a random background color; the shape map is the edge map of
    the render and the color map its box blur with radius side/8.  The same
    seed always yields identical bytes.
    """
    if side < 8:
        raise ValueError(f"side must be >= 8, got {side}")
    rng = np.random.default_rng(seed)
    vertex_count = int(rng.integers(3, 7))
    jitter = rng.uniform(0.0, 1.0, vertex_count)
    angles = 2.0 * np.pi * (np.arange(vertex_count) + jitter) / vertex_count
    cx = side / 2.0 + rng.uniform(-side / 8.0, side / 8.0)
    cy = side / 2.0 + rng.uniform(-side / 8.0, side / 8.0)
    ax = rng.uniform(0.25, 0.42) * side
    ay = rng.uniform(0.25, 0.42) * side
    verts = np.stack([cx + ax * np.cos(angles), cy + ay * np.sin(angles)], axis=1)

    background = rng.uniform(0.0, 1.0, 3)
    fill = rng.uniform(0.0, 1.0, 3)
    while np.abs(fill - background).max() < 0.25:
        fill = rng.uniform(0.0, 1.0, 3)

    ys, xs = np.mgrid[0:side, 0:side]
    inside = np.ones((side, side), dtype=bool)
    for i in range(vertex_count):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % vertex_count]
        cross = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
        inside &= cross >= 0.0
    mask = inside.astype(np.float64)

    data = np.where(mask[:, :, None] > 0.0, fill[None, None, :], background[None, None, :])
    image = Image(data)
    return ProceduralSample(
        image=image,
        shape_map=edge_map(image),
        color_map=blur_average(image, max(1, side // 8)),
        mask=Image(mask[:, :, None]),
    )


@dataclass(frozen=True)
class ToyConfig:
    """Training configuration; the run is a pure function of these fields."""

    seed: int
    image_side: int = 16
    z_dim: int = 8
    hidden: tuple = (128,)
    learning_rate: float = 0.05
    steps: int = 200
    batch: int = 16
    weights: LossWeights = field(default_factory=LossWeights)
    holdout: int = 16
    histogram_bins: int = 8
    freeze_discriminator: bool = False
    fixed_batch: bool = False
    dump_every: int = 0
    dump_dir: str | None = None

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")
        if self.image_side < 8:
            raise ValueError("image_side must be >= 8")
        if self.z_dim < 1 or self.batch < 1 or self.holdout < 1 or self.histogram_bins < 1:
            raise ValueError("z_dim, batch, holdout, and histogram_bins must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.dump_every < 0:
            raise ValueError("dump_every must be >= 0")
        if self.dump_every > 0 and not self.dump_dir:
            raise ValueError("dump_every needs a dump_dir")
        hidden = tuple(int(h) for h in self.hidden)
        if not hidden or any(h < 1 for h in hidden):
            raise ValueError("hidden must be a non-empty tuple of positive widths")
        object.__setattr__(self, "hidden", hidden)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        out["weights"] = {"lambda1": self.weights.lambda1, "lambda2": self.weights.lambda2}
        return out


@dataclass(frozen=True)
class StepRecord:
    gan: float
    shape: float
    color: float
    ta: float


@dataclass(frozen=True)
class TrainingReport:
    """Per-step losses plus held-out combined loss before and after training."""

    records: tuple
    initial_holdout_ta: float
    final_holdout_ta: float
    seed: int
    config: dict

    def to_json(self) -> str:
        payload = {
            "records": [asdict(r) for r in self.records],
            "initial_holdout_ta": self.initial_holdout_ta,
            "final_holdout_ta": self.final_holdout_ta,
            "seed": self.seed,
            "config": self.config,
        }
        return json.dumps(payload, sort_keys=True, indent=2)


def _derive_seed(*parts) -> int:
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


def _soft_histogram(values: np.ndarray, bins: int):
    """Gaussian-kernel histogram (bandwidth = bin width) that sums to 1."""
    centers = (np.arange(bins) + 0.5) / bins
    sigma = 1.0 / bins
    kernel = np.exp(-((values[:, None] - centers[None, :]) ** 2) / (2.0 * sigma ** 2))
    row_mass = kernel.sum(axis=1)
    probs = kernel / row_mass[:, None]
    return probs.mean(axis=0), (kernel, row_mass, probs, centers, sigma)


def soft_color_kl(generated: np.ndarray, reference: np.ndarray, channels: int, bins: int):
    """Differentiable KL between soft histograms, summed over channels.

    Returns (kl, grad) with grad the derivative w.r.t. the generated samples
    (same flat layout as the input).
    """
    gen = generated.reshape(-1, channels)
    ref = reference.reshape(-1, channels)
    count = gen.shape[0]
    total = 0.0
    grad = np.empty_like(gen)
    for c in range(channels):
        hist, (kernel, row_mass, probs, centers, sigma) = _soft_histogram(gen[:, c], bins)
        ref_hist, _ = _soft_histogram(ref[:, c], bins)
        log_ratio = np.log(hist / ref_hist)
        total += float(np.sum(hist * log_ratio))
        # d kl / d hist_b = log_ratio_b + 1; d hist_b / d v_i = d probs_ib / d v_i / count
        dkernel = kernel * (centers[None, :] - gen[:, c][:, None]) / sigma ** 2
        drow = dkernel.sum(axis=1)
        dprobs = (dkernel - probs * drow[:, None]) / row_mass[:, None]
        grad[:, c] = dprobs @ (log_ratio + 1.0) / count
    return total, grad.reshape(generated.shape)


def _flatten_batch(samples, z: np.ndarray):
    shape_maps = np.stack([s.shape_map.data.reshape(-1) for s in samples])
    color_maps = np.stack([s.color_map.data.reshape(-1) for s in samples])
    reals = np.stack([s.image.data.reshape(-1) for s in samples])
    return shape_maps, color_maps, reals, np.concatenate([shape_maps, color_maps, z], axis=1)


def _hard_color(fake_flat: np.ndarray, ref_flat: np.ndarray, side: int, bins: int) -> float:
    fake_img = Image(np.clip(fake_flat.reshape(side, side, 3), 0.0, 1.0))
    ref_img = Image(ref_flat.reshape(side, side, 3))
    return color_loss(color_histogram(fake_img, bins), color_histogram(ref_img, bins))


def _apply_updates(net: TinyNet, grads_list, scale: float) -> None:
    for layer, updates in zip(net.layers, zip(*grads_list)):
        dw = sum(u[0] for u in updates)
        db = sum(u[1] for u in updates)
        layer.weights = layer.weights + scale * dw
        layer.bias = layer.bias + scale * db


def _holdout_ta(gen_net: TinyNet, holdout, weights: LossWeights, side: int, bins: int) -> float:
    shape_maps, color_maps, reals, gen_in = holdout
    fakes, _ = forward(gen_net, gen_in)
    values = []
    for b in range(len(fakes)):
        shape = float(np.abs(reals[b] - fakes[b]).mean())
        color = _hard_color(fakes[b], color_maps[b], side, bins)
        values.append(weights.lambda1 * color + weights.lambda2 * shape)
    return float(np.mean(values))


def train_toy_gan(config: ToyConfig) -> TrainingReport:
    """Alternating adversarial training at desk scale; see the module docstring.

    Raises DivergenceDetected (carrying the partial report) if any recorded
    loss becomes non-finite.
    """
    side = config.image_side
    pixels = side * side
    image_dim = 3 * pixels
    weights = config.weights
    lr = config.learning_rate
    batch = config.batch

    gen_net = init_net(
        [pixels + image_dim + config.z_dim, *config.hidden, image_dim],
        ["tanh"] * len(config.hidden) + ["sigmoid"],
        np.random.default_rng([config.seed, _TAG_G_INIT]),
        scale=INIT_SCALE,
    )
    disc_net = init_net(
        [pixels + image_dim + image_dim, *config.hidden, 1],
        ["tanh"] * len(config.hidden) + ["sigmoid"],
        np.random.default_rng([config.seed, _TAG_D_INIT]),
        scale=INIT_SCALE,
    )

    holdout_samples = [
        gen_procedural_sample(_derive_seed(config.seed, _TAG_HOLDOUT, i), side)
        for i in range(config.holdout)
    ]
    holdout_z = np.random.default_rng([config.seed, _TAG_HOLDOUT_NOISE]).standard_normal(
        (config.holdout, config.z_dim))
    holdout = _flatten_batch(holdout_samples, holdout_z)

    initial_ta = _holdout_ta(gen_net, holdout, weights, side, config.histogram_bins)
    records = []

    def partial_report() -> TrainingReport:
        return TrainingReport(
            records=tuple(records),
            initial_holdout_ta=initial_ta,
            final_holdout_ta=_holdout_ta(gen_net, holdout, weights, side,
                                         config.histogram_bins),
            seed=config.seed,
            config=config.to_dict(),
        )

    for step in range(config.steps):
        data_step = 0 if config.fixed_batch else step
        samples = [
            gen_procedural_sample(_derive_seed(config.seed, _TAG_DATA, data_step, j), side)
            for j in range(batch)
        ]
        z = np.random.default_rng([config.seed, _TAG_NOISE, data_step]).standard_normal(
            (batch, config.z_dim))
        shape_maps, color_maps, reals, gen_in = _flatten_batch(samples, z)

        fakes, gen_cache = forward(gen_net, gen_in)
        d_real, real_cache = forward(disc_net,
                                     np.concatenate([shape_maps, color_maps, reals], axis=1))
        d_fake, fake_cache = forward(disc_net,
                                     np.concatenate([shape_maps, color_maps, fakes], axis=1))
        d_real_v = d_real[:, 0]
        d_fake_v = d_fake[:, 0]

        if not config.freeze_discriminator:
            # ascend log D(real) + log(1 - D(fake)); clamp kills the gradient
            # exactly where the objective's log is floored
            up_real = np.where(d_real_v > LOG_FLOOR, 1.0 / (batch * d_real_v), 0.0)
            up_fake = np.where(1.0 - d_fake_v > LOG_FLOOR,
                               -1.0 / (batch * (1.0 - d_fake_v)), 0.0)
            grads_real, _ = backward(disc_net, real_cache, up_real[:, None])
            grads_fake, _ = backward(disc_net, fake_cache, up_fake[:, None])
            _apply_updates(disc_net, [grads_real, grads_fake], lr)

        d_out, d_cache = forward(disc_net,
                                 np.concatenate([shape_maps, color_maps, fakes], axis=1))
        d_out_v = d_out[:, 0]
        down = np.where(1.0 - d_out_v > LOG_FLOOR,
                        -1.0 / (batch * (1.0 - d_out_v)), 0.0)
        _, d_input_grad = backward(disc_net, d_cache, down[:, None])
        fake_grad = d_input_grad[:, -image_dim:].copy()
        fake_grad += weights.lambda2 * np.sign(fakes - reals) / (batch * image_dim)

        for b in range(batch):
            _, grad = soft_color_kl(fakes[b], color_maps[b], 3, config.histogram_bins)
            fake_grad[b] += weights.lambda1 * grad / batch
        gen_grads, _ = backward(gen_net, gen_cache, fake_grad)
        _apply_updates(gen_net, [gen_grads], -lr)

        if config.dump_every and step % config.dump_every == 0:
            dump_dir = Path(config.dump_dir)
            dump_dir.mkdir(parents=True, exist_ok=True)
            sample_img = Image(np.clip(fakes[0].reshape(side, side, 3), 0.0, 1.0))
            save_png(dump_dir / f"step{step:05d}.png", sample_img)

        gan_value = float(np.mean([gan_objective(float(r), float(f))
                                   for r, f in zip(d_real_v, d_fake_v)]))
        shape_value = float(np.abs(reals - fakes).mean())
        color_value = float(np.mean([
            _hard_color(fakes[b], color_maps[b], side, config.histogram_bins)
            for b in range(batch)
        ]))
        ta_value = weights.lambda1 * color_value + weights.lambda2 * shape_value
        records.append(StepRecord(gan=gan_value, shape=shape_value,
                                  color=color_value, ta=ta_value))
        if not all(np.isfinite([gan_value, shape_value, color_value, ta_value])):
            raise DivergenceDetected(
                f"non-finite loss at step {step}", report=partial_report())

    return partial_report()
