"""Three-stage pre-training protocol.

Stage 1 fits the slice encoder and prototypes with the 2D swapped loss.
Stage 2 fits the deformable stack, decoder and mask token with the masked
prediction loss while the encoder stays frozen. Stage 3 fits encoder, stack
and the shared prototypes with the 3D swapped loss.
"""

from __future__ import annotations

import contextlib
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .attention import AttentionConfig, DeformableStack
from .augment import TransformSpec, augment_batch
from .codes import Prototypes
from .encoder import EncoderConfig, SliceEncoder
from .losses import LossConfig, batch_intra_loss, batch_inter_loss
from .masking import Decoder, MaskToken, mask_loss, sample_mask

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class MissingPrerequisite(TrainingError):
    pass


@dataclass
class TrainConfig:
    epochs: tuple[int, int, int] = (50, 50, 50)
    slice_batch: int = 64
    volume_batch: int = 12
    lr: float = 0.05
    stage_lr: tuple[float | None, float | None, float | None] = (None, None, 0.02)
    mask_ratio: float = 0.10
    squared_mask: bool = False
    joint_stage2: bool = False
    strict: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or any(lr is not None and lr < 0 for lr in self.stage_lr):
            raise ValueError("learning rates must be non-negative")
        if self.slice_batch < 2 or self.volume_batch < 2:
            raise ValueError("batch sizes must be at least 2")
        if not 0.0 < self.mask_ratio <= 1.0:
            raise ValueError("mask ratio must lie in (0, 1]")

    def learning_rate(self, stage: int) -> float:
        lr = self.stage_lr[stage - 1]
        return self.lr if lr is None else lr


@dataclass
class ModelState:
    encoder: SliceEncoder
    prototypes: Prototypes
    stack: DeformableStack
    decoder: Decoder
    mask_token: MaskToken
    prototypes_3d: Prototypes | None = None
    completed: set[int] = field(default_factory=set)
    cursor: tuple[int, int] = (0, 0)

    @classmethod
    def create(cls, enc_cfg: EncoderConfig, att_cfg: AttentionConfig, clusters: int, seed: int,
               separate_3d_prototypes: bool = False, slices: int | None = None) -> ModelState:
        if att_cfg.width != enc_cfg.level_width or att_cfg.embed_dim != enc_cfg.embed_dim:
            raise ValueError("attention width/embedding must match the encoder's level width/embedding")
        if att_cfg.seq_len % enc_cfg.levels:
            raise ValueError("attention sequence length must be a multiple of the encoder levels")
        slices = att_cfg.seq_len // enc_cfg.levels if slices is None else slices
        rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(6)]
        return cls(
            encoder=SliceEncoder(enc_cfg, rngs[0]),
            prototypes=Prototypes.init(enc_cfg.embed_dim, clusters, rngs[1]),
            stack=DeformableStack(att_cfg, rngs[2]),
            decoder=Decoder(att_cfg.width, enc_cfg.feature_width, slices, rngs[3]),
            mask_token=MaskToken(att_cfg.width, rngs[4]),
            prototypes_3d=Prototypes.init(enc_cfg.embed_dim, clusters, rngs[5]) if separate_3d_prototypes else None,
        )

    @property
    def prototypes_for_volumes(self) -> Prototypes:
        return self.prototypes if self.prototypes_3d is None else self.prototypes_3d

    def groups(self) -> dict[str, dict[str, ad.Tensor]]:
        groups = {
            "encoder": self.encoder.parameters(),
            "prototypes": self.prototypes.parameters(),
            "attention": self.stack.parameters(),
            "decoder": self.decoder.parameters(),
            "mask_token": self.mask_token.parameters(),
        }
        if self.prototypes_3d is not None:
            groups["prototypes_3d"] = {"prototypes_3d": self.prototypes_3d.weight}
        return groups

    def named_parameters(self) -> dict[str, ad.Tensor]:
        out = {}
        for group, params in self.groups().items():
            for name, t in params.items():
                out[f"{group}/{name}"] = t
        return out


def sgd_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], lr: float,
             unit_columns: tuple[str, ...] = ()) -> None:
    """In-place ``p <- p - lr * g``; names in ``unit_columns`` get their columns re-normalized."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if lr == 0:
        # a zero step must be an exact no-op; re-normalizing would still move ulps
        return
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        p.data -= lr * g
        if name in unit_columns:
            p.data /= np.sqrt((p.data**2).sum(axis=0, keepdims=True))


def _apply(params: dict[str, ad.Tensor], lr: float, unit_columns=()) -> None:
    sgd_step(params, {k: t.grad for k, t in params.items() if t.grad is not None}, lr, unit_columns)


def _seeds(seed: int, *coords: int, count: int) -> np.ndarray:
    return np.random.SeedSequence([seed, *coords]).generate_state(count, dtype=np.uint64) >> np.uint64(1)


def _batches(count: int, size: int, rng: np.random.Generator):
    order = rng.permutation(count)
    for start in range(0, count, size):
        idx = order[start:start + size]
        if len(idx) >= 2:
            yield idx


def run_stage(stage: int, state: ModelState, volumes: np.ndarray, train: TrainConfig,
              losses: LossConfig | None = None, transform: TransformSpec | None = None,
              cold_start: bool = False, on_epoch=None) -> list[dict]:
    """Run one stage for ``train.epochs[stage - 1]`` epochs; returns per-epoch metric records.

    ``volumes`` is the unlabeled ``(V, n, E, E)`` array. ``on_epoch`` is
    called with each record as soon as the epoch finishes.
    """
    if stage not in (1, 2, 3):
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    needed = {1: set(), 2: {1}, 3: {1, 2}}[stage]
    missing = needed - state.completed
    if missing and not cold_start:
        raise MissingPrerequisite(f"stage {stage} requires completed stage(s) {sorted(missing)}")
    losses = losses or LossConfig()
    transform = transform or TransformSpec()
    volumes = np.asarray(volumes, dtype=np.float64)
    lr = train.learning_rate(stage)
    records = []
    # strict runs pin BLAS to one thread so reductions happen in a fixed order
    with threadpool_limits(limits=1) if train.strict else contextlib.nullcontext():
        for epoch in range(train.epochs[stage - 1]):
            records.append(_run_epoch(stage, epoch, state, volumes, train, losses, transform, lr, on_epoch))
    state.completed.add(stage)
    return records


def _run_epoch(stage, epoch, state, volumes, train, losses, transform, lr, on_epoch) -> dict:
    start = time.perf_counter()
    rng = np.random.default_rng(_seeds(train.seed, stage, epoch, count=1)[0])
    step = {1: _stage1_epoch, 2: _stage2_epoch, 3: _stage3_epoch}[stage]
    batch_losses = step(state, volumes, train, losses, transform, lr, rng, epoch)
    elapsed = (time.perf_counter() - start) * 1000.0
    record = {
        "stage": stage,
        "epoch": epoch,
        "loss": float(np.mean(batch_losses)),
        "wall_ms": 0 if train.strict else round(elapsed, 3),
        "seed": train.seed,
    }
    log.info("stage %d epoch %d loss %.6f (%.0f ms)", stage, epoch, record["loss"], elapsed)
    state.cursor = (stage, epoch + 1)
    if on_epoch is not None:
        on_epoch(record)
    return record


def _step(loss_fn, stage: int, epoch: int, batch: int):
    graph = ad.Graph()
    try:
        with graph:
            loss = loss_fn()
    except ad.NonFiniteError as err:
        raise TrainingError(f"non-finite value at stage {stage} epoch {epoch} batch {batch}: {err}") from err
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss at stage {stage} epoch {epoch} batch {batch}")
    graph.backward(loss)
    return value


def _stage1_epoch(state, volumes, train, losses, transform, lr, rng, epoch):
    slices = volumes.reshape((-1,) + volumes.shape[2:])
    out = []
    for b, idx in enumerate(_batches(len(slices), train.slice_batch, rng)):
        seeds = _seeds(train.seed, 1, epoch, b, count=2 * len(idx))
        view_t = augment_batch(slices[idx], transform, seeds[0::2])
        view_s = augment_batch(slices[idx], transform, seeds[1::2])
        out.append(_step(lambda: batch_intra_loss(view_t, view_s, state.encoder, state.prototypes, losses), 1, epoch, b))
        _apply(state.encoder.parameters(), lr)
        _apply(state.prototypes.parameters(), lr, unit_columns=("prototypes",))
    return out


def _stage2_epoch(state, volumes, train, losses, transform, lr, rng, epoch):
    n = volumes.shape[1]
    out = []
    for b, idx in enumerate(_batches(len(volumes), train.volume_batch, rng)):
        seeds = _seeds(train.seed, 2, epoch, b, count=2 * len(idx))
        views = augment_batch(volumes[idx], transform, seeds[0::2])
        plans = [sample_mask(n, train.mask_ratio, int(s)) for s in seeds[1::2]]
        out.append(_step(lambda: mask_loss(views, state.encoder, state.stack, state.decoder, state.mask_token,
                                           plans, squared=train.squared_mask, train_encoder=train.joint_stage2),
                         2, epoch, b))
        _apply(state.stack.parameters(), lr)
        _apply(state.decoder.parameters(), lr)
        _apply(state.mask_token.parameters(), lr)
        if train.joint_stage2:
            _apply(state.encoder.parameters(), lr)
    return out


def _stage3_epoch(state, volumes, train, losses, transform, lr, rng, epoch):
    out = []
    protos = state.prototypes_for_volumes
    for b, idx in enumerate(_batches(len(volumes), train.volume_batch, rng)):
        seeds = _seeds(train.seed, 3, epoch, b, count=2 * len(idx))
        view_t = augment_batch(volumes[idx], transform, seeds[0::2])
        view_s = augment_batch(volumes[idx], transform, seeds[1::2])
        out.append(_step(lambda: batch_inter_loss(view_t, view_s, state.encoder, state.stack, protos, losses),
                         3, epoch, b))
        _apply(state.encoder.parameters(), lr)
        _apply(state.stack.parameters(), lr)
        _apply(protos.parameters(), lr, unit_columns=("prototypes",))
    return out


def volume_embeddings(state: ModelState, volumes: np.ndarray, batch: int = 25) -> np.ndarray:
    """Holistic embeddings of clean (unaugmented) volumes, no gradient."""
    out = []
    with ad.no_grad():
        for start in range(0, len(volumes), batch):
            y = state.encoder.encode_volume_slices(volumes[start:start + batch])
            out.append(state.stack.volume_embed(y).data)
    return np.concatenate(out)


def slice_embeddings(state: ModelState, volumes: np.ndarray, batch: int = 256) -> np.ndarray:
    """Slice embeddings ``(V * n, d_z)`` of clean volumes, no gradient."""
    slices = volumes.reshape((-1,) + volumes.shape[2:])
    out = []
    with ad.no_grad():
        for start in range(0, len(slices), batch):
            out.append(state.encoder.encode(slices[start:start + batch]).data)
    return np.concatenate(out)
