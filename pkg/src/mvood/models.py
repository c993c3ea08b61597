"""Single-view and multi-view VAE architectures.

Per view the encoder is a stack of stride-2 conv blocks (relu) followed
by linear mu/logvar heads; the decoder mirrors it with transposed convs
and a final sigmoid so reconstructions stay in [0, 1]. The multi-view
model runs three independent encoders, concatenates the per-view latents,
mixes them through one shared linear bottleneck, then projects back to
per-view latents feeding three independent decoders. The training
objective per view is MSE + beta * KL; the multi-view total is the
weighted sum lambda*L_axial + delta*L_coronal + gamma*L_sagittal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ParamSet, Tensor
from .volume import VIEWS

CONV_K, CONV_PAD = 3, 1     # stride-2 conv halves even spatial dims exactly
DECONV_K, DECONV_PAD = 4, 1  # stride-2 transpose doubles them exactly


@dataclass
class VAEConfig:
    input_hw: tuple[int, int] = (32, 32)
    channels: tuple[int, ...] = (16, 32, 64)
    latent_dim: int = 32
    beta: float = 1.0
    multi_view: bool = False
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)  # axial, coronal, sagittal

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if any(w < 0 for w in self.loss_weights):
            raise ValueError("loss_weights must be >= 0")
        if self.multi_view and not any(self.loss_weights):
            raise ValueError("multi_view loss_weights cannot all be zero")
        stride_factor = 2 ** len(self.channels)
        for n in self.input_hw:
            if n % stride_factor:
                raise ValueError(
                    f"input size {self.input_hw} must be divisible by {stride_factor}"
                )

    @property
    def bottleneck_hw(self) -> tuple[int, int]:
        f = 2 ** len(self.channels)
        return (self.input_hw[0] // f, self.input_hw[1] // f)

    @property
    def flat_dim(self) -> int:
        h, w = self.bottleneck_hw
        return self.channels[-1] * h * w

    def to_dict(self) -> dict:
        return {
            "input_hw": list(self.input_hw),
            "channels": list(self.channels),
            "latent_dim": self.latent_dim,
            "beta": self.beta,
            "multi_view": self.multi_view,
            "loss_weights": list(self.loss_weights),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VAEConfig":
        known = {"input_hw", "channels", "latent_dim", "beta", "multi_view", "loss_weights"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"VAEConfig: unknown keys {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("input_hw", "channels", "loss_weights"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass
class VAEOutput:
    recons: dict[str, Tensor]
    mu: dict[str, Tensor]
    logvar: dict[str, Tensor]
    z: Tensor


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------

def _he_conv(rng, shape, dtype):
    fan_in = shape[1] * shape[2] * shape[3]
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


def _glorot_linear(rng, shape, dtype):
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _bias(rng, n, dtype):
    # small positive offsets keep relu pre-activations off the exact kink,
    # which would otherwise break finite-difference gradient checks
    return rng.uniform(0.01, 0.05, size=n).astype(dtype)


def _add_encoder_params(ps: ParamSet, prefix: str, config: VAEConfig, rng, dtype):
    c_in = 1
    for i, c_out in enumerate(config.channels):
        ps.add(f"{prefix}.conv{i}.weight", Tensor(_he_conv(rng, (c_out, c_in, CONV_K, CONV_K), dtype), True))
        ps.add(f"{prefix}.conv{i}.bias", Tensor(_bias(rng, c_out, dtype), True))
        c_in = c_out
    for head in ("fc_mu", "fc_logvar"):
        ps.add(f"{prefix}.{head}.weight",
               Tensor(_glorot_linear(rng, (config.flat_dim, config.latent_dim), dtype), True))
        ps.add(f"{prefix}.{head}.bias", Tensor(np.zeros(config.latent_dim, dtype), True))


def _add_decoder_params(ps: ParamSet, prefix: str, config: VAEConfig, rng, dtype):
    ps.add(f"{prefix}.fc.weight",
           Tensor(_glorot_linear(rng, (config.latent_dim, config.flat_dim), dtype), True))
    ps.add(f"{prefix}.fc.bias", Tensor(_bias(rng, config.flat_dim, dtype), True))
    chans = list(config.channels[::-1]) + [1]
    for i in range(len(config.channels)):
        c_in, c_out = chans[i], chans[i + 1]
        ps.add(f"{prefix}.deconv{i}.weight",
               Tensor(_he_conv(rng, (c_in, c_out, DECONV_K, DECONV_K), dtype), True))
        ps.add(f"{prefix}.deconv{i}.bias", Tensor(_bias(rng, c_out, dtype), True))


def init_svae_params(config: VAEConfig, seed: int, dtype=np.float32) -> ParamSet:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
    ps = ParamSet()
    _add_encoder_params(ps, "enc_axial", config, rng, dtype)
    _add_decoder_params(ps, "dec_axial", config, rng, dtype)
    return ps


def init_mvae_params(config: VAEConfig, seed: int, dtype=np.float32) -> ParamSet:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
    ps = ParamSet()
    for view in VIEWS:
        _add_encoder_params(ps, f"enc_{view}", config, rng, dtype)
    d3 = 3 * config.latent_dim
    ps.add("fusion.shared.weight", Tensor(_glorot_linear(rng, (d3, d3), dtype), True))
    ps.add("fusion.shared.bias", Tensor(_bias(rng, d3, dtype), True))
    for view in VIEWS:
        ps.add(f"fusion.split_{view}.weight",
               Tensor(_glorot_linear(rng, (d3, config.latent_dim), dtype), True))
        ps.add(f"fusion.split_{view}.bias", Tensor(np.zeros(config.latent_dim, dtype), True))
    for view in VIEWS:
        _add_decoder_params(ps, f"dec_{view}", config, rng, dtype)
    return ps


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def conv_trunk(x: Tensor, params: ParamSet, prefix: str, config: VAEConfig) -> Tensor:
    """Shared encoder conv stack, flattened to [N, flat_dim]."""
    if x.data.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != tuple(config.input_hw):
        raise ValueError(f"encode: expected [N,1,{config.input_hw[0]},{config.input_hw[1]}], got {x.shape}")
    h = x
    for i in range(len(config.channels)):
        h = T.conv2d(h, params[f"{prefix}.conv{i}.weight"], params[f"{prefix}.conv{i}.bias"],
                     stride=2, padding=CONV_PAD)
        h = T.relu(h)
    return h.reshape(h.shape[0], config.flat_dim)


def encode(x: Tensor, params: ParamSet, prefix: str, config: VAEConfig) -> tuple[Tensor, Tensor]:
    h = conv_trunk(x, params, prefix, config)
    mu = T.linear(h, params[f"{prefix}.fc_mu.weight"], params[f"{prefix}.fc_mu.bias"])
    logvar = T.linear(h, params[f"{prefix}.fc_logvar.weight"], params[f"{prefix}.fc_logvar.bias"])
    return mu, logvar


def decode(z: Tensor, params: ParamSet, prefix: str, config: VAEConfig) -> Tensor:
    h = T.linear(z, params[f"{prefix}.fc.weight"], params[f"{prefix}.fc.bias"])
    h = T.relu(h)
    bh, bw = config.bottleneck_hw
    h = h.reshape(h.shape[0], config.channels[-1], bh, bw)
    n_blocks = len(config.channels)
    for i in range(n_blocks):
        h = T.conv2d_transpose(h, params[f"{prefix}.deconv{i}.weight"],
                               params[f"{prefix}.deconv{i}.bias"], stride=2, padding=DECONV_PAD)
        h = T.relu(h) if i < n_blocks - 1 else T.sigmoid(h)
    return h


def svae_forward(x: Tensor, params: ParamSet, config: VAEConfig, epsilon) -> VAEOutput:
    mu, logvar = encode(x, params, "enc_axial", config)
    z = T.reparameterize(mu, logvar, epsilon)
    recon = decode(z, params, "dec_axial", config)
    return VAEOutput(recons={"axial": recon}, mu={"axial": mu}, logvar={"axial": logvar}, z=z)


def mvae_forward(xa: Tensor, xc: Tensor, xs: Tensor, params: ParamSet,
                 config: VAEConfig, epsilon) -> VAEOutput:
    """Three encoders -> concatenated latent -> shared bottleneck -> split
    per-view projections -> three decoders.

    ``epsilon`` is either one array of shape [N, 3*latent_dim] or a scalar 0.
    """
    inputs = {"axial": xa, "coronal": xc, "sagittal": xs}
    for view, x in inputs.items():
        if x is None:
            raise ValueError(f"mvae_forward: missing {view} input")
    mu, logvar, zs = {}, {}, []
    eps = np.asarray(epsilon)
    for i, view in enumerate(VIEWS):
        mu[view], logvar[view] = encode(inputs[view], params, f"enc_{view}", config)
        if eps.ndim == 0:
            eps_v = eps
        else:
            eps_v = eps[:, i * config.latent_dim : (i + 1) * config.latent_dim]
        zs.append(T.reparameterize(mu[view], logvar[view], eps_v))
    z = T.concat(zs, axis=1)
    shared = T.relu(T.linear(z, params["fusion.shared.weight"], params["fusion.shared.bias"]))
    recons = {}
    for view in VIEWS:
        zv = T.linear(shared, params[f"fusion.split_{view}.weight"], params[f"fusion.split_{view}.bias"])
        recons[view] = decode(zv, params, f"dec_{view}", config)
    return VAEOutput(recons=recons, mu=mu, logvar=logvar, z=z)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def vae_view_loss(recon: Tensor, x: Tensor, mu: Tensor, logvar: Tensor, beta: float) -> Tensor:
    loss = T.mse_loss(recon, x)
    if beta:
        loss = loss + beta * T.kl_divergence_diag_gaussian(mu, logvar)
    return loss


def multiview_total_loss(l_axial: Tensor, l_coronal: Tensor, l_sagittal: Tensor,
                         weights: tuple[float, float, float]) -> Tensor:
    lam, delta, gamma = weights
    return lam * l_axial + delta * l_coronal + gamma * l_sagittal


def svae_loss(x: Tensor, params: ParamSet, config: VAEConfig, epsilon) -> Tensor:
    out = svae_forward(x, params, config, epsilon)
    return vae_view_loss(out.recons["axial"], x, out.mu["axial"], out.logvar["axial"], config.beta)


def mvae_loss(xa: Tensor, xc: Tensor, xs: Tensor, params: ParamSet,
              config: VAEConfig, epsilon) -> Tensor:
    out = mvae_forward(xa, xc, xs, params, config, epsilon)
    inputs = {"axial": xa, "coronal": xc, "sagittal": xs}
    per_view = [
        vae_view_loss(out.recons[v], inputs[v], out.mu[v], out.logvar[v], config.beta)
        for v in VIEWS
    ]
    return multiview_total_loss(*per_view, weights=config.loss_weights)


# ---------------------------------------------------------------------------
# model wrappers and checkpoints
# ---------------------------------------------------------------------------

class SingleViewVAE:
    """Axial-only VAE: reconstructs controls of one view."""

    arch = "svae"

    def __init__(self, config: VAEConfig, seed: int = 0, params: ParamSet | None = None,
                 dtype=np.float32):
        self.config = config
        self.params = params if params is not None else init_svae_params(config, seed, dtype)

    def epsilon_shape(self, n: int) -> tuple[int, int]:
        return (n, self.config.latent_dim)

    def batch_loss(self, batch: dict[str, np.ndarray], epsilon) -> Tensor:
        x = Tensor(batch["axial"])
        return svae_loss(x, self.params, self.config, epsilon)

    def forward(self, batch: dict[str, np.ndarray], epsilon=0.0) -> VAEOutput:
        return svae_forward(Tensor(batch["axial"]), self.params, self.config, epsilon)


class MultiViewVAE:
    """Three-encoder VAE with bottleneck fusion and split decoders."""

    arch = "mvae"

    def __init__(self, config: VAEConfig, seed: int = 0, params: ParamSet | None = None,
                 dtype=np.float32):
        self.config = config
        self.params = params if params is not None else init_mvae_params(config, seed, dtype)

    def epsilon_shape(self, n: int) -> tuple[int, int]:
        return (n, 3 * self.config.latent_dim)

    def batch_loss(self, batch: dict[str, np.ndarray], epsilon) -> Tensor:
        return mvae_loss(Tensor(batch["axial"]), Tensor(batch["coronal"]),
                         Tensor(batch["sagittal"]), self.params, self.config, epsilon)

    def forward(self, batch: dict[str, np.ndarray], epsilon=0.0) -> VAEOutput:
        return mvae_forward(Tensor(batch["axial"]), Tensor(batch["coronal"]),
                            Tensor(batch["sagittal"]), self.params, self.config, epsilon)


def build_model(arch: str, config: VAEConfig, seed: int = 0):
    if arch == "svae":
        return SingleViewVAE(config, seed=seed)
    if arch == "mvae":
        return MultiViewVAE(config, seed=seed)
    raise ValueError(f"unknown architecture {arch!r}")


@dataclass
class ModelCheckpoint:
    arch: str
    config: VAEConfig
    params: ParamSet

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.params.save(directory)
        with open(directory / "config.json", "w") as fh:
            json.dump({"arch": self.arch, "config": self.config.to_dict()}, fh,
                      indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory) -> "ModelCheckpoint":
        directory = Path(directory)
        with open(directory / "config.json") as fh:
            meta = json.load(fh)
        config = VAEConfig.from_dict(meta["config"])
        params = ParamSet.load(directory)
        return cls(arch=meta["arch"], config=config, params=params)

    def build(self):
        cls = SingleViewVAE if self.arch == "svae" else MultiViewVAE
        return cls(self.config, params=self.params)
