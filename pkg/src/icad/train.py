"""Pretraining loop over synthetic episodes, plus checkpoint serialization.

Training is measured in optimizer steps, not epochs: the episode stream is
endless and every episode is freshly sampled from the prior.  One step
consumes ``batch_episodes * grad_accum`` episodes; gradients accumulate over
the micro-batches and are divided by ``grad_accum`` before the Adam update,
so the update equals what a single large batch would produce.

Checkpoints are a small binary container: an 8-byte magic, a little-endian
uint64 header length, a canonical JSON header (format version, model config,
tensor manifest, payload checksum, free-form meta) and the raw float32
little-endian tensor payload.  Loading verifies structure and checksum and
reports each failure mode with a distinct exception type.
"""

import csv
import hashlib
import json
import logging
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ModelConfig, ModelParams, forward_logits, parameter_manifest
from .priors import PriorConfig, sample_pretraining_episode
from .rng import derive_rng
from .tensor import AdamState, NumericError, Tensor, add, adam_step, cosine_lr, cross_entropy, mul

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ICADCKPT"
CHECKPOINT_VERSION = 1
GRAD_CLIP_NORM = 100.0


class CheckpointError(Exception):
    """Base class for checkpoint read/write failures."""


class CheckpointFormatError(CheckpointError):
    """The file is structurally not a valid checkpoint."""


class CheckpointVersionError(CheckpointError):
    """The file uses a format version this code does not understand."""


class CheckpointIntegrityError(CheckpointError):
    """The payload does not match its recorded checksum."""


class TrainingDiverged(RuntimeError):
    """Raised when a step produces non-finite numbers; training stops.

    Any checkpoints already written stay on disk; ``last_checkpoint`` points
    at the most recent one (or None when divergence hit before the first).
    """

    def __init__(self, step: int, last_checkpoint: str | None, reason: str):
        tail = (
            f" (last good checkpoint: {last_checkpoint})"
            if last_checkpoint
            else " (no checkpoint had been written yet)"
        )
        super().__init__(f"training diverged at step {step}: {reason}{tail}")
        self.step = step
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    lr0: float = 1e-4
    batch_episodes: int = 4
    grad_accum: int = 16
    prior: PriorConfig = field(default_factory=PriorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    checkpoint_every: int = 500
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        for name in ("steps", "batch_episodes", "grad_accum", "checkpoint_every", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1, got {getattr(self, name)}")
        if not self.lr0 > 0.0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if self.prior.dim_range[1] > self.model.d_max:
            raise ValueError(
                f"prior draws up to {self.prior.dim_range[1]} features but the model "
                f"d_max is {self.model.d_max}"
            )


@dataclass
class TrainRecord:
    step: int
    lr: float
    loss: float
    acc: float
    seconds: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    checkpoint_path: str | None = None


def loss_on_episode(params: ModelParams, episode) -> Tensor:
    """Mean cross-entropy over the query rows.  Context labels are never read."""
    return cross_entropy(forward_logits(episode, params), np.asarray(episode.query_labels))


def _mean_loss(losses: list) -> Tensor:
    total = losses[0]
    for term in losses[1:]:
        total = add(total, term)
    return mul(total, 1.0 / len(losses))


def pretrain(
    cfg: TrainConfig,
    out_dir=None,
    initial_params: ModelParams | None = None,
    episode_fn=None,
    checkpoint_meta: dict | None = None,
):
    """Run the pretraining loop and return ``(params, TrainLog)``.

    When ``out_dir`` is given, a ``train_log.csv`` plus periodic and final
    checkpoints are written there (``checkpoint_meta`` rides along in each
    checkpoint header).  ``initial_params`` warm-starts from an existing
    model; ``episode_fn(index)`` overrides the episode stream (the default
    samples from ``cfg.prior`` with an index-derived generator, so the
    stream depends only on the prior seed and the episode index).
    """
    if initial_params is not None:
        if initial_params.config != cfg.model:
            raise ValueError("initial_params config does not match cfg.model")
        params = initial_params
    else:
        params = ModelParams.init(cfg.model, cfg.seed)

    if episode_fn is None:
        def episode_fn(index):
            return sample_pretraining_episode(cfg.prior, derive_rng(cfg.prior.seed, "episode", index))

    tensors = params.parameters()
    state = AdamState.for_params(tensors)
    log = TrainLog()

    csv_path = None
    if out_dir is not None:
        out_dir = str(out_dir)
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, "train_log.csv")
        with open(csv_path, "w", newline="") as fh:
            csv.writer(fh).writerow(["step", "lr", "loss", "acc", "seconds"])

    per_step = cfg.batch_episodes * cfg.grad_accum
    started = time.monotonic()
    for step in range(cfg.steps):
        lr = cosine_lr(step, cfg.steps, cfg.lr0)
        for tensor in tensors:
            tensor.grad = None
        step_loss = 0.0
        correct = 0
        seen = 0
        try:
            for micro in range(cfg.grad_accum):
                losses = []
                for slot in range(cfg.batch_episodes):
                    index = step * per_step + micro * cfg.batch_episodes + slot
                    episode = episode_fn(index)
                    logits = forward_logits(episode, params)
                    labels = np.asarray(episode.query_labels)
                    losses.append(cross_entropy(logits, labels))
                    predicted = (logits.data[:, 1] > logits.data[:, 0]).astype(labels.dtype)
                    correct += int((predicted == labels).sum())
                    seen += labels.size
                micro_loss = _mean_loss(losses)
                micro_loss.backward()
                step_loss += micro_loss.item()
            mean_loss = step_loss / cfg.grad_accum
            if not math.isfinite(mean_loss):
                raise NumericError(f"loss became {mean_loss}")
            grads = []
            for tensor in tensors:
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)
                tensor.grad /= cfg.grad_accum
                grads.append(tensor.grad)
            norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
            if not math.isfinite(norm):
                raise NumericError("gradient norm is not finite")
            if norm > GRAD_CLIP_NORM:
                logger.warning(
                    "step %d: gradient norm %.3g exceeds %.0f, clipping", step, norm, GRAD_CLIP_NORM
                )
                scale = GRAD_CLIP_NORM / norm
                for grad in grads:
                    grad *= scale
            adam_step(tensors, grads, state, lr)
        except NumericError as exc:
            raise TrainingDiverged(step, log.checkpoint_path, str(exc)) from exc

        done = step + 1
        if out_dir is not None and done % cfg.checkpoint_every == 0 and done < cfg.steps:
            path = os.path.join(out_dir, f"checkpoint_step{done:06d}.ckpt")
            save_checkpoint(params, path, extra_meta=checkpoint_meta)
            log.checkpoint_path = path
        if step % cfg.log_every == 0 or done == cfg.steps:
            record = TrainRecord(
                step=step,
                lr=lr,
                loss=mean_loss,
                acc=correct / max(1, seen),
                seconds=time.monotonic() - started,
            )
            log.records.append(record)
            if csv_path is not None:
                with open(csv_path, "a", newline="") as fh:
                    csv.writer(fh).writerow(
                        [record.step, f"{record.lr:.10g}", f"{record.loss:.10g}",
                         f"{record.acc:.10g}", f"{record.seconds:.10g}"]
                    )
            logger.info(
                "step %d/%d lr %.3g loss %.4f acc %.3f", step, cfg.steps, lr, mean_loss, record.acc
            )

    if out_dir is not None:
        final = os.path.join(out_dir, "checkpoint_final.ckpt")
        save_checkpoint(params, final, extra_meta=checkpoint_meta)
        log.checkpoint_path = final
    return params, log


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path, extra_meta: dict | None = None) -> None:
    """Write params to ``path``.  Tensors are stored as little-endian float32."""
    manifest = []
    chunks = []
    offset = 0
    for name, tensor in params.tensors.items():
        raw = np.ascontiguousarray(tensor.data.astype("<f4", copy=False)).tobytes()
        manifest.append(
            {"name": name, "shape": list(tensor.data.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "manifest": manifest,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": dict(extra_meta or {}),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)
    os.replace(tmp, str(path))


def load_checkpoint(path):
    """Read a checkpoint and return ``(ModelParams, header_dict)``.

    Raises CheckpointFormatError for structural problems (magic, header,
    manifest, truncation), CheckpointVersionError for an unsupported format
    version, and CheckpointIntegrityError when the payload checksum fails.
    """
    with open(str(path), "rb") as fh:
        blob = fh.read()
    prefix = len(CHECKPOINT_MAGIC)
    if len(blob) < prefix + 8 or not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointFormatError(f"{path} is not a checkpoint file (bad magic)")
    header_len = struct.unpack_from("<Q", blob, prefix)[0]
    start = prefix + 8
    if len(blob) < start + header_len:
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start : start + header_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})") from exc

    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version} is not supported (this build reads version "
            f"{CHECKPOINT_VERSION})"
        )
    try:
        config = ModelConfig(**header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: invalid model config in header ({exc})") from exc

    manifest = header.get("manifest")
    expected = parameter_manifest(config)
    if not isinstance(manifest, list) or len(manifest) != len(expected):
        raise CheckpointFormatError(
            f"{path}: manifest lists {len(manifest) if isinstance(manifest, list) else 'no'} "
            f"tensors but the config requires {len(expected)}"
        )
    running = 0
    for entry, (name, shape, _kind) in zip(manifest, expected):
        if entry.get("name") != name:
            raise CheckpointFormatError(
                f"{path}: manifest names tensor {entry.get('name')!r} where {name!r} was expected"
            )
        if tuple(entry.get("shape", ())) != shape:
            raise CheckpointFormatError(
                f"{path}: tensor {name} has shape {entry.get('shape')} but the config requires "
                f"{list(shape)}"
            )
        nbytes = 4 * int(np.prod(shape))
        if entry.get("offset") != running or entry.get("nbytes") != nbytes:
            raise CheckpointFormatError(f"{path}: tensor {name} has an inconsistent payload slot")
        running += nbytes

    payload = blob[start + header_len :]
    if len(payload) != running:
        raise CheckpointFormatError(
            f"{path}: payload holds {len(payload)} bytes but the manifest describes {running} "
            "(file truncated or padded)"
        )
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointIntegrityError(f"{path}: payload checksum mismatch, file is corrupt")

    tensors = {}
    offset = 0
    for name, shape, _kind in expected:
        count = int(np.prod(shape))
        data = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        tensors[name] = Tensor(data.reshape(shape).astype(np.float32), requires_grad=True)
        offset += 4 * count
    return ModelParams(config, tensors), header
