"""Training orchestration: epochs, optimizer steps, telemetry, checkpoints.

Deterministic by construction: the batch order for epoch e is a pure
function of (seed, e), parameter init is seeded, and the only stateful
RNG streams (sampler noise, buffer draws) are checkpointed. Cross-
entropy and penalty runs are therefore bit-reproducible and resumable;
sampler-driven runs reproduce given identical RNG streams.
"""

from __future__ import annotations

import csv
import json
import zipfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import energy as en
from . import losses
from . import metrics
from . import nn
from . import sampler as smp

__all__ = [
    "TrainConfig", "EpochRecord", "RunLog", "Checkpoint", "EvalResult",
    "CheckpointError", "TrainingDiverged",
    "train", "evaluate", "checkpoint_save", "checkpoint_load", "runlog_to_csv",
]

CHECKPOINT_FORMAT_VERSION = 1
PROBE_SIZE = 512   # fixed subset for the per-epoch gradient-magnitude telemetry


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt or from an incompatible format version."""


class TrainingDiverged(RuntimeError):
    """Raised under the abort policy when a batch produces a non-finite loss."""


@dataclass
class TrainConfig:
    model: nn.ModelSpec
    loss: losses.LossConfig
    epochs: int = 150
    batch_size: int = 64
    seed: int = 0
    schedule: nn.LrSchedule = field(default_factory=lambda: nn.LrSchedule(1e-4))
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_interval: int = 0       # 0 -> no intermediate checkpoints
    checkpoint_dir: Optional[str] = None
    divergence_policy: str = "skip-batch"   # or "abort"
    buffer_capacity: int = 10000
    buffer_reinit_prob: float = 0.05
    probe_size: int = PROBE_SIZE

    def __post_init__(self):
        if self.divergence_policy not in ("skip-batch", "abort"):
            raise losses.ConfigError(
                f"unknown divergence policy {self.divergence_policy!r}")
        if self.loss.mode is losses.Mode.JEM and self.loss.sampler is None:
            raise losses.ConfigError("JEM training requires a sampler config")
        if self.checkpoint_interval and not self.checkpoint_dir:
            raise losses.ConfigError("checkpoint_interval set without checkpoint_dir")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_total: float
    loss_ce: float
    loss_aux: float
    diverged_chains: int
    skipped_batches: int
    eval_accuracy: float
    mean_egm: float


@dataclass
class RunLog:
    records: list = field(default_factory=list)

    def append(self, record: EpochRecord):
        self.records.append(record)

    def __len__(self):
        return len(self.records)


@dataclass
class Checkpoint:
    model: nn.ModelSpec
    params: nn.Parameters
    adam: nn.AdamState
    epoch: int                              # completed epochs
    sampler_rng_state: Optional[dict] = None
    buffer_rng_state: Optional[dict] = None
    buffer_samples: Optional[np.ndarray] = None


@dataclass
class EvalResult:
    accuracy: float
    mean_confidence: float
    ece_report: metrics.EceReport


def _mean_egm(model, params, dataset, probe_size: int) -> float:
    probe = dataset.x[:min(probe_size, len(dataset))]
    grads = en.energy_grad_input(model, params, probe)
    return float(np.linalg.norm(grads.reshape(grads.shape[0], -1), axis=1).mean())


def _accuracy(model, params, dataset, batch_size: int = 512) -> float:
    hits = 0
    for start in range(0, len(dataset), batch_size):
        x = dataset.x[start:start + batch_size]
        y = dataset.y[start:start + batch_size]
        logits = nn.forward(model, params, x).value if isinstance(model, nn.ModelSpec) \
            else en.model_logits(model, params, ad.Tensor(x)).value
        hits += int((logits.argmax(axis=1) == y).sum())
    return hits / len(dataset)


def train(config: TrainConfig, dataset_train: datamod.Dataset,
          dataset_eval: datamod.Dataset,
          resume: Optional[Checkpoint] = None) -> tuple[Checkpoint, RunLog]:
    """Run the configured number of epochs and return the final state.

    ``resume`` continues a previous run: training from a checkpoint
    written at epoch k up to epoch n reproduces an uninterrupted run to
    n bit-exactly in the deterministic modes.
    """
    mode = config.loss.mode
    if resume is not None:
        params = resume.params.copy()
        adam = nn.AdamState(m={k: v.copy() for k, v in resume.adam.m.items()},
                            v={k: v.copy() for k, v in resume.adam.v.items()},
                            t=resume.adam.t, lr=resume.adam.lr,
                            beta1=resume.adam.beta1, beta2=resume.adam.beta2,
                            eps=resume.adam.eps)
        start_epoch = resume.epoch
    else:
        params = nn.init(config.model, config.seed)
        adam = nn.AdamState.for_params(params, lr=config.schedule.base_rate,
                                       beta1=config.adam_beta1,
                                       beta2=config.adam_beta2, eps=config.adam_eps)
        start_epoch = 0

    sampler_rng = np.random.default_rng([config.seed, 2])
    buffer = None
    if mode is losses.Mode.JEM:
        buffer = smp.ReplayBuffer(capacity=config.buffer_capacity,
                                  reinit_prob=config.buffer_reinit_prob,
                                  rng=np.random.default_rng([config.seed, 3]),
                                  sanity_bound=config.loss.sampler.bound)
    if resume is not None:
        if resume.sampler_rng_state is not None:
            sampler_rng.bit_generator.state = resume.sampler_rng_state
        if buffer is not None and resume.buffer_rng_state is not None:
            buffer.rng.bit_generator.state = resume.buffer_rng_state
        if buffer is not None and resume.buffer_samples is not None:
            smp.buffer_push(buffer, resume.buffer_samples,
                            np.full(resume.buffer_samples.shape[0], -1))

    log = RunLog()
    iterator = datamod.BatchIterator(dataset_train, config.batch_size, config.seed)
    for epoch in range(start_epoch, config.epochs):
        adam.lr = nn.lr_at(config.schedule, epoch)
        totals = np.zeros(3)
        n_batches = 0
        diverged = 0
        skipped = 0
        for batch_index, (x, y) in enumerate(iterator.epoch(epoch)):
            graph = losses.loss_graph(config.loss, config.model, params, x, y,
                                      buffer=buffer, rng=sampler_rng)
            diverged += graph.breakdown.diverged_chains
            bad = not np.isfinite(graph.breakdown.total)
            grads = None
            if not bad:
                gm = ad.backward(graph.tape, graph.total, list(graph.bound.values()))
                grads = {name: gm[leaf].value for name, leaf in graph.bound.items()}
                bad = any(not np.all(np.isfinite(g)) for g in grads.values())
            if bad:
                if config.divergence_policy == "abort":
                    raise TrainingDiverged(
                        f"non-finite loss or gradient at epoch {epoch}, batch {batch_index}")
                skipped += 1
                continue
            nn.adam_step(adam, params, grads)
            if buffer is not None and graph.gen_samples is not None \
                    and graph.gen_samples.shape[0]:
                smp.buffer_push(buffer, graph.gen_samples, graph.gen_indices)
            totals += (graph.breakdown.total, graph.breakdown.cross_entropy,
                       graph.breakdown.auxiliary)
            n_batches += 1

        denom = max(n_batches, 1)
        log.append(EpochRecord(
            epoch=epoch, lr=adam.lr,
            loss_total=totals[0] / denom, loss_ce=totals[1] / denom,
            loss_aux=totals[2] / denom, diverged_chains=diverged,
            skipped_batches=skipped,
            eval_accuracy=_accuracy(config.model, params, dataset_eval),
            mean_egm=_mean_egm(config.model, params, dataset_train, config.probe_size)))

        if config.checkpoint_interval and (epoch + 1) % config.checkpoint_interval == 0:
            ckpt = _snapshot(config, params, adam, epoch + 1, sampler_rng, buffer)
            checkpoint_save(ckpt, f"{config.checkpoint_dir}/checkpoint_epoch{epoch + 1}.npz")

    final = _snapshot(config, params, adam, config.epochs, sampler_rng, buffer)
    return final, log


def _snapshot(config, params, adam, epoch, sampler_rng, buffer) -> Checkpoint:
    return Checkpoint(
        model=config.model, params=params.copy(),
        adam=nn.AdamState(m={k: v.copy() for k, v in adam.m.items()},
                          v={k: v.copy() for k, v in adam.v.items()},
                          t=adam.t, lr=adam.lr, beta1=adam.beta1,
                          beta2=adam.beta2, eps=adam.eps),
        epoch=epoch,
        sampler_rng_state=sampler_rng.bit_generator.state,
        buffer_rng_state=buffer.rng.bit_generator.state if buffer is not None else None,
        buffer_samples=np.stack([buffer.sample_at(i) for i in range(len(buffer))])
        if buffer is not None and len(buffer) else None)


def evaluate(checkpoint: Checkpoint, dataset: datamod.Dataset,
             n_bins: int = metrics.DEFAULT_ECE_BINS) -> EvalResult:
    """Accuracy, mean confidence, and the calibration report."""
    logits = nn.forward(checkpoint.model, checkpoint.params, dataset.x).value
    probs = en.softmax_probs(logits)
    confidence = probs.max(axis=1)
    correct = probs.argmax(axis=1) == dataset.y
    return EvalResult(accuracy=float(correct.mean()),
                      mean_confidence=float(confidence.mean()),
                      ece_report=metrics.ece(confidence, correct, n_bins))


# ---------------------------------------------------------------------------
# checkpoint container: a zip of .npy arrays plus a JSON manifest
# ("__meta__") holding the model descriptor, optimizer scalars, epoch
# counter, and RNG states. Layout is documented in the README and
# guarded by CHECKPOINT_FORMAT_VERSION.

def checkpoint_save(checkpoint: Checkpoint, path) -> None:
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model": checkpoint.model.to_dict(),
        "epoch": checkpoint.epoch,
        "adam": {"t": checkpoint.adam.t, "lr": checkpoint.adam.lr,
                 "beta1": checkpoint.adam.beta1, "beta2": checkpoint.adam.beta2,
                 "eps": checkpoint.adam.eps},
        "param_names": checkpoint.params.names(),
        "sampler_rng_state": checkpoint.sampler_rng_state,
        "buffer_rng_state": checkpoint.buffer_rng_state,
        "has_buffer": checkpoint.buffer_samples is not None,
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for name, arr in checkpoint.params.arrays.items():
        arrays[f"param::{name}"] = arr
        arrays[f"adam_m::{name}"] = checkpoint.adam.m[name]
        arrays[f"adam_v::{name}"] = checkpoint.adam.v[name]
    if checkpoint.buffer_samples is not None:
        arrays["buffer::samples"] = checkpoint.buffer_samples
    np.savez(str(path), **arrays)


def checkpoint_load(path) -> Checkpoint:
    try:
        with np.load(str(path), allow_pickle=False) as archive:
            meta = json.loads(bytes(archive["__meta__"]).decode())
            if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                raise CheckpointError(
                    f"{path}: format version {meta.get('format_version')} "
                    f"!= expected {CHECKPOINT_FORMAT_VERSION}")
            model = nn.ModelSpec.from_dict(meta["model"])
            params = nn.Parameters(
                {name: archive[f"param::{name}"] for name in meta["param_names"]})
            adam = nn.AdamState(
                m={name: archive[f"adam_m::{name}"] for name in meta["param_names"]},
                v={name: archive[f"adam_v::{name}"] for name in meta["param_names"]},
                t=meta["adam"]["t"], lr=meta["adam"]["lr"],
                beta1=meta["adam"]["beta1"], beta2=meta["adam"]["beta2"],
                eps=meta["adam"]["eps"])
            buffer_samples = archive["buffer::samples"] if meta["has_buffer"] else None
            return Checkpoint(model=model, params=params, adam=adam,
                              epoch=meta["epoch"],
                              sampler_rng_state=meta["sampler_rng_state"],
                              buffer_rng_state=meta["buffer_rng_state"],
                              buffer_samples=buffer_samples)
    except CheckpointError:
        raise
    except (OSError, KeyError, ValueError, json.JSONDecodeError,
            zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: corrupt or unreadable checkpoint: {exc}") from exc


def runlog_to_csv(log: RunLog, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "loss_total", "loss_ce", "loss_aux",
                         "diverged_chains", "skipped_batches", "eval_accuracy",
                         "mean_egm"])
        for r in log.records:
            writer.writerow([r.epoch, f"{r.lr:.12g}", f"{r.loss_total:.12g}",
                             f"{r.loss_ce:.12g}", f"{r.loss_aux:.12g}",
                             r.diverged_chains, r.skipped_batches,
                             f"{r.eval_accuracy:.12g}", f"{r.mean_egm:.12g}"])
