"""Adam training over sampled triplets with a soft-IoU objective.

Both stages share one loop: a sampler produces (references, target,
guidance, ground truth) tuples, the forward pass runs on a fresh tape per
sample, batch gradients are averaged by scaling each sample's loss, and
Adam applies the update. The pretraining stage fakes motion by warping a
single annotated frame three ways; the video stage samples real triplets
with a bounded random frame skip.
"""

import numpy as np

from . import ops
from .autodiff import Tape, zero_gradients
from .datagen import sample_triplet_indices, synth_pretrain_pair
from .errors import NpmcaError
from .metrics import iou_loss
from .model import ModelParams, forward_single_object
from .propagation import mask_out_background
from .rng import spawn_rng
from .tensor import Tensor


class TrainingDiverged(NpmcaError):
    """Loss left the reals; carries the iteration that produced it."""

    def __init__(self, iteration: int, loss: float):
        super().__init__(f"loss became {loss} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


class Adam:
    """Standard Adam with bias correction over named parameters."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {name: np.zeros(p.value.shape) for name, p in params.items()}
        self._v = {name: np.zeros(p.value.shape) for name, p in params.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            if not p.trainable:
                continue
            g = p.gradient.array
            m = self._m[name] = self.beta1 * self._m[name] + (1.0 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p.value = Tensor(p.value.array - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


class TrainingSample:
    """One already-assembled training example for a single object."""

    __slots__ = ("first_masked", "prev_masked", "cur_rgb", "guidance", "target")

    def __init__(self, first_masked, prev_masked, cur_rgb, guidance, target):
        self.first_masked = first_masked
        self.prev_masked = prev_masked
        self.cur_rgb = cur_rgb
        self.guidance = guidance
        self.target = target


def _pick_object(mask: np.ndarray, rng) -> int:
    ids = [int(v) for v in np.unique(mask) if v != 0]
    return ids[int(rng.integers(len(ids)))]


def _assemble(triplet, object_id: int) -> TrainingSample:
    (f0, m0), (fp, mp), (ft, mt) = triplet
    return TrainingSample(
        first_masked=mask_out_background(f0, m0, object_id),
        prev_masked=mask_out_background(fp, mp, object_id),
        cur_rgb=np.asarray(ft, dtype=np.float64),
        guidance=(np.asarray(mp) == object_id).astype(np.float64),
        target=(np.asarray(mt) == object_id).astype(np.float64),
    )


def make_pretrain_sampler(videos):
    """Static-image stage: warp one annotated frame into a fake triplet."""
    if not videos:
        raise ValueError("pretraining needs at least one sequence")

    def sample(rng) -> TrainingSample:
        video = videos[int(rng.integers(len(videos)))]
        t = int(rng.integers(len(video.frames)))
        triplet = synth_pretrain_pair(video.frames[t], video.masks[t], int(rng.integers(1 << 31)))
        return _assemble(triplet, _pick_object(triplet[0][1], rng))

    return sample


def make_finetune_sampler(videos, max_skip: int = 5):
    """Video stage: real triplets in temporal order with random skip."""
    if not videos:
        raise ValueError("fine-tuning needs at least one sequence")

    def sample(rng) -> TrainingSample:
        video = videos[int(rng.integers(len(videos)))]
        first, middle, last = sample_triplet_indices(len(video.frames), max_skip, rng)
        triplet = tuple((video.frames[i], video.masks[i]) for i in (first, middle, last))
        return _assemble(triplet, _pick_object(video.masks[first], rng))

    return sample


def train_loop(
    params: ModelParams,
    sampler,
    iterations: int,
    lr: float,
    batch_size: int = 4,
    seed: int = 0,
    log_stream=None,
    disable_cm: bool = False,
) -> list[float]:
    """Run Adam for the given number of iterations; returns per-iteration
    batch losses and writes them as CSV when a stream is given."""
    named = params.named_parameters()
    optimizer = Adam(named, lr)
    rng = spawn_rng(seed, 23)
    losses = []
    if log_stream is not None:
        log_stream.write("iter,loss\n")
    for it in range(1, iterations + 1):
        zero_gradients(named.values())
        batch_loss = 0.0
        for _ in range(batch_size):
            s = sampler(rng)
            tape = Tape()
            prob = forward_single_object(
                params, s.first_masked, s.prev_masked, s.cur_rgb, s.guidance,
                tape=tape, disable_cm=disable_cm,
            )
            loss = iou_loss(prob, s.target)
            tape.backward(ops.scale(loss, 1.0 / batch_size))
            batch_loss += loss.item() / batch_size
        if not np.isfinite(batch_loss):
            raise TrainingDiverged(it, batch_loss)
        optimizer.step()
        losses.append(batch_loss)
        if log_stream is not None:
            log_stream.write(f"{it},{batch_loss:.8f}\n")
    return losses
