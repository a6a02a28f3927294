"""Dense-network VAE engine with hand-rolled gradients.

Implements the circle-product latent model and a plain Euclidean-latent
beta-VAE baseline on top of the reverse-mode Tensor in autodiff.py: encoder
MLP, reparameterized sampling, per-circle normalization, the rank-1 latent
assembly, decoder MLP, the beta-weighted loss and Adam. Training is
single-threaded and fully determined by the config seed.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat
from .errors import ConfigError, FormatError, NumericsError
from .geometry import DegenerateInputError, _product_from_components, embed_angles

ACTIVATIONS = ("identity", "relu", "tanh")

TORUS = "torus"
EUCLIDEAN = "euclidean"

SCALE_SYMMETRIC = "symmetric"  # data already in [-1, 1]
SCALE_UNIT = "unit"  # data in [0, 1], mapped to [-1, 1] for the tanh decoder

CHECKPOINT_MAGIC = b"TDVAE1"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class LatentSpec:
    mode: str
    dim: int  # number of circles (torus) or latent width (euclidean)

    def __post_init__(self):
        if self.mode not in (TORUS, EUCLIDEAN):
            raise ConfigError(f"unknown latent mode {self.mode!r}")
        if self.dim < 1:
            raise ConfigError("latent dim must be >= 1")

    @property
    def encoder_out_dim(self) -> int:
        return 4 * self.dim if self.mode == TORUS else 2 * self.dim

    @property
    def decoder_in_dim(self) -> int:
        return 2**self.dim + self.dim if self.mode == TORUS else self.dim

    @property
    def code_dim(self) -> int:
        return self.dim


class DenseNetwork:
    """A stack of fully connected layers with per-layer activations."""

    def __init__(self, layer_dims, activations, rng: np.random.Generator):
        if len(layer_dims) < 2 or len(activations) != len(layer_dims) - 1:
            raise ConfigError("layer dims and activations do not chain")
        for act in activations:
            if act not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {act!r}")
        self.activations = list(activations)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            limit = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            self.weights.append(Tensor(w))
            self.biases.append(Tensor(np.zeros(fan_out)))
        self.input_dim = layer_dims[0]
        self.output_dim = layer_dims[-1]

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.data.shape[1] != self.input_dim:
            raise ValueError(
                f"expected input shape (N, {self.input_dim}), got {x.data.shape}"
            )
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            h = h.matmul(w) + b
            if act == "relu":
                h = h.relu()
            elif act == "tanh":
                h = h.tanh()
        return h

    def parameters(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def layer_specs(self):
        return [
            (w.data.shape[0], w.data.shape[1], act)
            for w, act in zip(self.weights, self.activations)
        ]


@dataclass
class EncoderOutput:
    """Posterior parameters; mu/logvar are (N, D, 2) for circles, (N, L) otherwise."""

    mode: str
    mu: np.ndarray
    logvar: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.logvar)


class VaeModel:
    def __init__(self, latent: LatentSpec, encoder: DenseNetwork, decoder: DenseNetwork,
                 input_scale: str = SCALE_SYMMETRIC):
        if encoder.output_dim != latent.encoder_out_dim:
            raise ConfigError("encoder output does not match the latent layout")
        if decoder.input_dim != latent.decoder_in_dim:
            raise ConfigError("decoder input does not match the latent layout")
        if input_scale not in (SCALE_SYMMETRIC, SCALE_UNIT):
            raise ConfigError(f"unknown input scale {input_scale!r}")
        self.latent = latent
        self.encoder = encoder
        self.decoder = decoder
        self.input_scale = input_scale

    # -- graph builders -----------------------------------------------------

    def _split_encoder_output(self, out: Tensor):
        n = out.data.shape[0]
        d = self.latent.dim
        if self.latent.mode == TORUS:
            blocks = out.reshape(n, d, 4)
            mu = blocks[:, :, 0:2]
            logvar = blocks[:, :, 2:4]
        else:
            mu = out[:, 0:d]
            logvar = out[:, d : 2 * d]
        return mu, logvar

    def _latent_input(self, mu: Tensor, logvar: Tensor, noise: np.ndarray) -> Tensor:
        sigma = (logvar * 0.5).exp()
        m_hat = mu + sigma * Tensor(noise)
        if self.latent.mode == EUCLIDEAN:
            return m_hat
        norm_sq = m_hat.square().sum(axis=2, keepdims=True)
        if np.any(norm_sq.data == 0.0):
            rows = np.unique(np.argwhere(norm_sq.data == 0.0)[:, 0])
            raise DegenerateInputError(
                f"sampled circle tuple collapsed to zero for batch rows {rows.tolist()}"
            )
        m = m_hat / norm_sq.sqrt()
        n, d = m.data.shape[0], self.latent.dim
        v = m[:, 0, :]
        for a in range(1, d):
            v = (v.reshape(n, -1, 1) * m[:, a, :].reshape(n, 1, 2)).reshape(n, -1)
        v_orient = m[:, :, 0]
        return concat([v, v_orient], axis=1)

    def _forward_graph(self, x: np.ndarray, noise: np.ndarray):
        xt = Tensor(x)
        mu, logvar = self._split_encoder_output(self.encoder.forward(xt))
        v = self._latent_input(mu, logvar, noise)
        recon = self.decoder.forward(v)
        return xt, mu, logvar, recon

    # -- inference ----------------------------------------------------------

    def encode(self, x: np.ndarray) -> EncoderOutput:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = self.encoder.forward(Tensor(x))
        mu, logvar = self._split_encoder_output(out)
        return EncoderOutput(self.latent.mode, mu.data.copy(), logvar.data.copy())

    def decode(self, v: np.ndarray) -> np.ndarray:
        v = np.atleast_2d(np.asarray(v, dtype=float))
        return self.decoder.forward(Tensor(v)).data.copy()

    def reconstruct_mean(self, x: np.ndarray) -> np.ndarray:
        """Noise-free reconstruction: the decoder sees the normalized posterior mean."""
        enc = self.encode(x)
        if self.latent.mode == EUCLIDEAN:
            return self.decode(enc.mu)
        norms = np.linalg.norm(enc.mu, axis=2, keepdims=True)
        if np.any(norms == 0.0):
            raise DegenerateInputError("posterior mean tuple collapsed to zero")
        m = enc.mu / norms
        v = _product_from_components(m[:, :, 0], m[:, :, 1])
        return self.decode(np.concatenate([v, m[:, :, 0]], axis=1))

    def codes(self, x: np.ndarray) -> np.ndarray:
        """Per-sample latent codes for the metrics pipeline.

        Circle mode reads the angle of each normalized posterior-mean tuple;
        Euclidean mode reads the posterior means themselves.
        """
        enc = self.encode(x)
        if self.latent.mode == EUCLIDEAN:
            return enc.mu.copy()
        norms = np.linalg.norm(enc.mu, axis=2)
        if np.any(norms == 0.0):
            raise DegenerateInputError("posterior mean tuple collapsed to zero")
        return np.mod(np.arctan2(enc.mu[:, :, 1], enc.mu[:, :, 0]), 2.0 * np.pi)

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def snapshot(self):
        return [p.data.copy() for p in self.parameters()]

    def restore(self, snapshot):
        for p, saved in zip(self.parameters(), snapshot):
            p.data[...] = saved


def build_vae(latent: LatentSpec, input_dim: int, hidden, rng: np.random.Generator,
              input_scale: str = SCALE_SYMMETRIC) -> VaeModel:
    hidden = list(hidden)
    if input_dim < 1 or any(h < 1 for h in hidden):
        raise ConfigError("dimensions must be positive")
    enc_dims = [input_dim] + hidden + [latent.encoder_out_dim]
    enc_acts = ["relu"] * len(hidden) + ["identity"]
    dec_dims = [latent.decoder_in_dim] + hidden[::-1] + [input_dim]
    dec_acts = ["relu"] * len(hidden) + ["tanh"]
    encoder = DenseNetwork(enc_dims, enc_acts, rng)
    decoder = DenseNetwork(dec_dims, dec_acts, rng)
    return VaeModel(latent, encoder, decoder, input_scale)


# -- loss ---------------------------------------------------------------------


@dataclass
class ElboResult:
    loss: float
    reconstruction: float
    kl: float
    grads: list


def elbo_loss(model: VaeModel, x: np.ndarray, beta: float, noise: np.ndarray) -> ElboResult:
    """Batch loss (mean squared reconstruction norm plus beta * KL) and its gradients.

    noise must hold one standard-normal draw per Gaussian component, shaped
    like the encoder's mu block; the result is deterministic given it.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("expected a (N, input_dim) batch")
    n = x.shape[0]
    for p in model.parameters():
        p.zero_grad()
    xt, mu, logvar, recon = model._forward_graph(x, noise)
    recon_term = (recon - xt).square().sum() * (1.0 / n)
    var = logvar.exp()
    kl_term = (var + mu.square() - logvar + (-1.0)).sum() * (0.5 / n)
    loss = recon_term + kl_term * beta
    if not np.isfinite(loss.data):
        bad = np.unique(np.argwhere(~np.isfinite(recon.data))[:, 0])
        raise NumericsError(
            f"non-finite loss (recon={recon_term.data}, kl={kl_term.data}) on a "
            f"batch of {n}; offending rows: {bad.tolist()[:8]}"
        )
    loss.backward()
    grads = [p.grad.copy() for p in model.parameters()]
    return ElboResult(float(loss.data), float(recon_term.data), float(kl_term.data), grads)


# -- Adam ----------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(params, grads, state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, applied in place to the parameter data."""
    state.step += 1
    t = state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not np.isfinite(g).all():
            raise NumericsError("non-finite gradient")
        m[...] = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v[...] = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1**t)
        v_hat = v / (1.0 - ADAM_BETA2**t)
        p.data[...] = p.data - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return state


# -- training -------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    mode: str
    latent_dim: int
    beta: float
    learning_rate: float
    batch_size: int
    epochs: int
    seed: int
    hidden: tuple = (256, 128)
    val_fraction: float = 0.2
    input_scale: str = SCALE_SYMMETRIC

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        LatentSpec(self.mode, self.latent_dim)  # validates mode/dim

    def latent(self) -> LatentSpec:
        return LatentSpec(self.mode, self.latent_dim)


@dataclass
class TrainReport:
    train_loss: list
    val_mse: list
    best_epoch: int
    seed: int
    mode: str
    latent_dim: int
    beta: float

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "latent_dim": self.latent_dim,
            "beta": self.beta,
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "train_loss": self.train_loss,
            "val_mse": self.val_mse,
        }


def _scale_in(x: np.ndarray, input_scale: str) -> np.ndarray:
    return 2.0 * x - 1.0 if input_scale == SCALE_UNIT else x


def scale_out(y: np.ndarray, input_scale: str) -> np.ndarray:
    """Map decoder output back to the dataset's value range."""
    return np.clip((y + 1.0) / 2.0, 0.0, 1.0) if input_scale == SCALE_UNIT else y


def _noise_shape(latent: LatentSpec, n: int):
    if latent.mode == TORUS:
        return (n, latent.dim, 2)
    return (n, latent.dim)


def validation_mse(model: VaeModel, x_scaled: np.ndarray) -> float:
    """Per-element reconstruction MSE with the noise-free latent."""
    recon = model.reconstruct_mean(x_scaled)
    return float(np.mean((recon - x_scaled) ** 2))


def train(config: TrainConfig, samples: np.ndarray):
    """Train a model on raw samples; returns (model, report).

    Deterministic per seed: initialization, the train/validation split, epoch
    shuffles and reparameterization noise all come from independent streams
    spawned off config.seed. The returned model carries the parameters of the
    epoch with the lowest validation MSE.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ConfigError("dataset must be a nonempty (N, input_dim) array")
    n, input_dim = samples.shape

    streams = np.random.SeedSequence(config.seed).spawn(4)
    init_rng, split_rng, shuffle_rng, noise_rng = (np.random.default_rng(s) for s in streams)

    latent = config.latent()
    model = build_vae(latent, input_dim, config.hidden, init_rng, config.input_scale)

    x = _scale_in(samples, config.input_scale)
    perm = split_rng.permutation(n)
    n_val = int(round(n * config.val_fraction))
    if n_val == 0 or n_val == n:
        train_x = val_x = x
    else:
        val_x = x[perm[:n_val]]
        train_x = x[perm[n_val:]]

    params = model.parameters()
    state = AdamState.for_params(params)

    train_loss = []
    val_mse = []
    best_epoch = 0
    best_snapshot = model.snapshot()
    n_train = train_x.shape[0]
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n_train)
        total = 0.0
        for lo in range(0, n_train, config.batch_size):
            batch = train_x[order[lo : lo + config.batch_size]]
            noise = noise_rng.standard_normal(_noise_shape(latent, batch.shape[0]))
            result = elbo_loss(model, batch, config.beta, noise)
            adam_step(params, result.grads, state, config.learning_rate)
            total += result.loss * batch.shape[0]
        train_loss.append(total / n_train)
        val_mse.append(validation_mse(model, val_x))
        if val_mse[epoch] < val_mse[best_epoch] or epoch == 0:
            best_epoch = epoch
            best_snapshot = model.snapshot()

    model.restore(best_snapshot)
    report = TrainReport(
        train_loss=train_loss,
        val_mse=val_mse,
        best_epoch=best_epoch,
        seed=config.seed,
        mode=config.mode,
        latent_dim=config.latent_dim,
        beta=config.beta,
    )
    return model, report


def generate(model: VaeModel, angles) -> np.ndarray:
    """Decode the embedding of explicit angles (circle-latent models only)."""
    if model.latent.mode != TORUS:
        raise ConfigError("generate() needs a circle-latent model")
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    if angles.shape != (model.latent.dim,):
        raise ValueError(f"expected {model.latent.dim} angles, got shape {angles.shape}")
    v = embed_angles(angles).as_vector()
    return model.decode(v[None, :])[0]


# -- checkpoint io ---------------------------------------------------------------

_ACT_TAGS = {"identity": 0, "relu": 1, "tanh": 2}
_TAG_ACTS = {v: k for k, v in _ACT_TAGS.items()}
_MODE_TAGS = {TORUS: 0, EUCLIDEAN: 1}
_TAG_MODES = {v: k for k, v in _MODE_TAGS.items()}
_SCALE_TAGS = {SCALE_SYMMETRIC: 0, SCALE_UNIT: 1}
_TAG_SCALES = {v: k for k, v in _SCALE_TAGS.items()}


def _pack_layers(net: DenseNetwork) -> bytes:
    parts = [struct.pack("<B", len(net.weights))]
    for fan_in, fan_out, act in net.layer_specs():
        parts.append(struct.pack("<IIB", fan_in, fan_out, _ACT_TAGS[act]))
    return b"".join(parts)


def save_checkpoint(model: VaeModel, path) -> None:
    header = [
        CHECKPOINT_MAGIC,
        struct.pack(
            "<BBII",
            _MODE_TAGS[model.latent.mode],
            _SCALE_TAGS[model.input_scale],
            model.latent.dim,
            model.encoder.input_dim,
        ),
        _pack_layers(model.encoder),
        _pack_layers(model.decoder),
    ]
    blocks = []
    for net in (model.encoder, model.decoder):
        for w, b in zip(net.weights, net.biases):
            blocks.append(np.ascontiguousarray(w.data, dtype="<f8").tobytes())
            blocks.append(np.ascontiguousarray(b.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(header + blocks))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.blob):
            raise FormatError(f"truncated file: {self.path}")
        out = self.blob[self.offset : self.offset + size]
        self.offset += size
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self):
        if self.offset != len(self.blob):
            raise FormatError(f"{len(self.blob) - self.offset} trailing bytes in {self.path}")


def _read_layers(reader: _Reader):
    (count,) = reader.unpack("<B")
    specs = []
    for _ in range(count):
        fan_in, fan_out, tag = reader.unpack("<IIB")
        if tag not in _TAG_ACTS:
            raise FormatError(f"unknown activation tag {tag} in {reader.path}")
        specs.append((fan_in, fan_out, _TAG_ACTS[tag]))
    return specs


def load_checkpoint(path) -> VaeModel:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), path)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic in {path}")
    mode_tag, scale_tag, latent_dim, input_dim = reader.unpack("<BBII")
    if mode_tag not in _TAG_MODES or scale_tag not in _TAG_SCALES:
        raise FormatError(f"unknown mode/scale tags in {path}")
    latent = LatentSpec(_TAG_MODES[mode_tag], latent_dim)
    enc_specs = _read_layers(reader)
    dec_specs = _read_layers(reader)

    def rebuild(specs):
        dims = [specs[0][0]] + [s[1] for s in specs]
        acts = [s[2] for s in specs]
        net = DenseNetwork(dims, acts, np.random.default_rng(0))
        for w, b, (fan_in, fan_out, _) in zip(net.weights, net.biases, specs):
            w.data[...] = np.frombuffer(reader.take(fan_in * fan_out * 8), dtype="<f8").reshape(
                fan_in, fan_out
            )
            b.data[...] = np.frombuffer(reader.take(fan_out * 8), dtype="<f8")
        return net

    encoder = rebuild(enc_specs)
    decoder = rebuild(dec_specs)
    reader.done()
    if encoder.input_dim != input_dim:
        raise FormatError(f"encoder input dim mismatch in {path}")
    return VaeModel(latent, encoder, decoder, _TAG_SCALES[scale_tag])
