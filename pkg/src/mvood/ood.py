"""Out-of-distribution decision procedures.

Two routes from a trained VAE to a per-slice lesion call:

* threshold: score every slice by deterministic (epsilon=0)
  reconstruction MSE, fit a Tukey upper fence Q3 + 1.5*IQR on
  tuning-control scores, flag slices scoring strictly above it;
* fine-tune: drop the decoder, keep the encoder weights, add a
  two-logit head and train the whole stack with cross-entropy on the
  labeled tuning split.

Evaluation always scores axial slices. The multi-view model still takes
all three views in threshold mode (only the axial reconstruction loss
is scored); ``mvae_eval="zero_fill"`` instead feeds zeros to the
coronal/sagittal encoders so plain axial slices can be scored. In
fine-tune mode only the axial encoder is retained.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .datasets import ViewTriplet
from .models import ModelCheckpoint, VAEConfig, conv_trunk, mvae_forward, svae_forward
from .preprocess import SliceSample
from .tensor import AdamState, ParamSet, Tensor, adam_step, backward
from .training import _to_batch_arrays
from .volume import VIEWS


@dataclass
class SampleId:
    patient_id: str
    view: str
    index: int


@dataclass
class OODScore:
    sample_id: SampleId
    score: float
    label: int


@dataclass
class ThresholdModel:
    q1: float
    q3: float
    iqr: float
    threshold: float


@dataclass
class Detection:
    sample_id: SampleId
    label: int
    prediction: int
    score: float          # reconstruction loss or class-1 probability


def _axial_id(sample) -> SampleId:
    s = sample.axial if isinstance(sample, ViewTriplet) else sample
    return SampleId(s.patient_id, s.view, s.index)


def _axial_label(sample) -> int:
    s = sample.axial if isinstance(sample, ViewTriplet) else sample
    return s.label


def reconstruction_scores(checkpoint: ModelCheckpoint, samples,
                          mvae_eval: str = "triplet",
                          batch_size: int = 64) -> list[OODScore]:
    """Per-sample axial reconstruction MSE under epsilon=0.

    sVAE checkpoints take SliceSamples; mVAE checkpoints take ViewTriplets
    (``mvae_eval="triplet"``) or axial SliceSamples with the other two
    encoder inputs zero-filled (``mvae_eval="zero_fill"``).
    """
    if not samples:
        return []
    config = checkpoint.config
    is_triplet = isinstance(samples[0], ViewTriplet)
    if checkpoint.arch == "svae" and is_triplet:
        raise ValueError("svae checkpoint scores SliceSamples, got ViewTriplets")
    if checkpoint.arch == "mvae" and mvae_eval == "triplet" and not is_triplet:
        raise ValueError("mvae triplet scoring needs ViewTriplets; "
                         "use mvae_eval='zero_fill' for plain axial slices")

    scores = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        arrays = _to_batch_arrays(chunk)
        xa = Tensor(arrays["axial"])
        if checkpoint.arch == "svae":
            out = svae_forward(xa, checkpoint.params, config, 0.0)
        else:
            if mvae_eval == "zero_fill" and not is_triplet:
                zeros = Tensor(np.zeros_like(arrays["axial"]))
                out = mvae_forward(xa, zeros, zeros, checkpoint.params, config, 0.0)
            else:
                out = mvae_forward(xa, Tensor(arrays["coronal"]), Tensor(arrays["sagittal"]),
                                   checkpoint.params, config, 0.0)
        recon = out.recons["axial"].data
        per = np.mean((recon - arrays["axial"]) ** 2, axis=(1, 2, 3))
        for sample, s in zip(chunk, per):
            scores.append(OODScore(_axial_id(sample), float(s), _axial_label(sample)))
    return scores


def iqr_threshold(tuning_scores) -> ThresholdModel:
    """Tukey upper fence on tuning-control scores (type-7 quartiles)."""
    scores = np.asarray(tuning_scores, dtype=np.float64)
    if scores.size < 4:
        raise ValueError(f"iqr_threshold: need >= 4 scores, got {scores.size}")
    q1, q3 = np.percentile(scores, [25, 75], method="linear")
    iqr = q3 - q1
    return ThresholdModel(q1=float(q1), q3=float(q3), iqr=float(iqr),
                          threshold=float(q3 + 1.5 * iqr))


# ---------------------------------------------------------------------------
# fine-tuned classifier
# ---------------------------------------------------------------------------

@dataclass
class FinetuneConfig:
    epochs: int = 20
    lr: float = 1e-4
    batch_size: int = 32
    seed: int = 0


class FinetunedClassifier:
    """Pretrained axial encoder plus a fresh two-logit linear head."""

    def __init__(self, params: ParamSet, config: VAEConfig):
        self.params = params
        self.config = config

    @classmethod
    def from_checkpoint(cls, checkpoint: ModelCheckpoint, seed: int = 0) -> "FinetunedClassifier":
        """Copy the axial encoder weights; decoder (and for the multi-view
        model the coronal/sagittal encoders and fusion) are discarded."""
        ps = ParamSet()
        for name, t in checkpoint.params.items():
            # the classifier embeds through the mu head; the logvar head is
            # dead weight once sampling is gone, so it is dropped too
            if name.startswith("enc_axial.") and not name.startswith("enc_axial.fc_logvar"):
                ps.add(name, Tensor(t.data.copy(), requires_grad=True))
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2,)))
        d = checkpoint.config.latent_dim
        bound = np.sqrt(6.0 / (d + 2))
        ps.add("head.weight", Tensor(rng.uniform(-bound, bound, (d, 2)).astype(np.float32), True))
        ps.add("head.bias", Tensor(np.zeros(2, dtype=np.float32), True))
        return cls(ps, checkpoint.config)

    def logits(self, x: Tensor) -> Tensor:
        h = conv_trunk(x, self.params, "enc_axial", self.config)
        mu = T.linear(h, self.params["enc_axial.fc_mu.weight"], self.params["enc_axial.fc_mu.bias"])
        return T.linear(mu, self.params["head.weight"], self.params["head.bias"])

    def probabilities(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Softmax class-1 probability per input slice."""
        probs = []
        for start in range(0, images.shape[0], batch_size):
            z = self.logits(Tensor(images[start : start + batch_size])).data
            z = z - z.max(axis=1, keepdims=True)
            ez = np.exp(z)
            probs.append(ez[:, 1] / ez.sum(axis=1))
        return np.concatenate(probs)


def finetune_classifier(checkpoint: ModelCheckpoint, tune_samples: list[SliceSample],
                        config: FinetuneConfig) -> tuple[FinetunedClassifier, list[float]]:
    """Cross-entropy fine-tuning of the axial encoder on the tuning split.

    Returns the classifier and the per-epoch mean training loss.
    """
    axial = [s for s in tune_samples if s.view == "axial"]
    labels = np.array([s.label for s in axial], dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ValueError("finetune_classifier: tuning split must contain both classes")

    clf = FinetunedClassifier.from_checkpoint(checkpoint, seed=config.seed)
    images = np.stack([s.image for s in axial])[:, None].astype(np.float32)
    n = images.shape[0]
    rng = np.random.default_rng(config.seed)
    state = AdamState(lr=config.lr).init(clf.params)

    epoch_losses = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            clf.params.zero_grad()
            loss = T.cross_entropy_loss(clf.logits(Tensor(images[idx])), labels[idx])
            backward(loss)
            adam_step(clf.params, state)
            total += loss.item() * len(idx)
        epoch_losses.append(total / n)
    return clf, epoch_losses


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------

def detect(mode: str, artifacts, eval_samples, mvae_eval: str = "triplet") -> list[Detection]:
    """Score evaluation axial slices and emit hard predictions.

    threshold mode: ``artifacts = (checkpoint, ThresholdModel)``; positive
    iff reconstruction loss strictly exceeds the fence.
    finetune mode: ``artifacts = FinetunedClassifier``; argmax of the two
    logits, ties resolved to class 0; the retained score is the softmax
    class-1 probability.
    """
    for sample in eval_samples:
        if _axial_id(sample).view != "axial":
            raise ValueError(f"detect: only axial slices are scored, got {_axial_id(sample).view!r}")

    if mode == "threshold":
        checkpoint, fence = artifacts
        scores = reconstruction_scores(checkpoint, eval_samples, mvae_eval=mvae_eval)
        return [
            Detection(s.sample_id, s.label, int(s.score > fence.threshold), s.score)
            for s in scores
        ]
    if mode == "finetune":
        clf = artifacts
        flat = [s.axial if isinstance(s, ViewTriplet) else s for s in eval_samples]
        images = np.stack([s.image for s in flat])[:, None].astype(np.float32)
        probs = clf.probabilities(images)
        return [
            Detection(_axial_id(s), _axial_label(s), int(p > 0.5), float(p))
            for s, p in zip(eval_samples, probs)
        ]
    raise ValueError(f"detect: unknown mode {mode!r}")
