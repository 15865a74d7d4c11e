"""Teacher-forced training of the two-stage tracker.

Every (conversation, turn) pair becomes one example: the gold repository for
the preceding turns plus the turn's tokens, labelled with the gold span and
ID decisions.  The loss is a masked hinge summed per example and averaged
over the batch, with stage one up-weighted.  Entity IDs are re-randomized
per conversation each epoch by a modulo-capacity shift so the model cannot
memorize absolute ID slots.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kernels
from .corpus import Conversation, split_corpus
from .encoding import Encoder, GENDER_INDEX, NUMBER_INDEX, TYPE_INDEX
from .errors import GradientError
from .network import TransformerModel, save_checkpoint
from .repository import gold_turn_references, seed_repository

log = logging.getLogger("turntrack.training")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 20
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    stage1_weight: float = 6.0
    id_randomization: bool = True
    # Supervise the stage-2 ID block on non-reference tokens with all
    # negative labels.  Without this the background ID logits are free to
    # drift positive, and at inference the decoder manufactures references
    # out of filler tokens, poisoning the repository for later turns.
    background_id_labels: bool = True
    seed: int = 0
    holdout_fraction: float = 0.0
    patience: int = 10
    checkpoint_every: int = 10
    checkpoint_dir: str | None = None


@dataclass(frozen=True)
class TrainingExample:
    conversation_id: str
    turn_index: int
    r_rows: np.ndarray
    u_rows: np.ndarray
    r_aug: np.ndarray
    u_aug: np.ndarray
    s1_labels: np.ndarray
    s1_mask: np.ndarray
    s2_labels: np.ndarray
    s2_mask: np.ndarray

    @property
    def num_tokens(self) -> int:
        return self.u_rows.shape[0]


def _offset_ref(ref, offset: int, capacity: int):
    if offset == 0:
        return ref
    return replace(
        ref,
        entity_id=(ref.entity_id + offset) % capacity,
        members=frozenset((m + offset) % capacity for m in ref.members),
    )


def teacher_context(conv: Conversation, turn_index: int, capacity: int,
                    offset: int = 0) -> list:
    """Gold repository contents before turn_index, with IDs shifted."""
    refs = [_offset_ref(r, offset, capacity)
            for r in seed_repository(conv.participants, capacity).refs]
    for ti in range(turn_index):
        for ref in gold_turn_references(conv, ti):
            refs.append(_offset_ref(ref, offset, capacity))
    return refs


def build_example(conv: Conversation, turn_index: int, encoder: Encoder,
                  offset: int = 0, background_id_labels: bool = True,
                  ) -> TrainingExample:
    lay = encoder.layout
    cap = lay.capacity
    turn = conv.turns[turn_index]
    refs = teacher_context(conv, turn_index, cap, offset)
    sender = conv.participants.index(turn.sender)
    role_ids = ((sender + offset) % cap, (1 - sender + offset) % cap)
    r_rows, u_rows = encoder.encode_elements(refs, turn.tokens, turn_index, role_ids)

    m = len(turn.tokens)
    num_props = lay.num_properties
    s1_labels = -np.ones((m, 2))
    s1_mask = np.ones((m, 2))
    s2_labels = -np.ones((m, 2 * cap + num_props))
    s2_mask = np.zeros((m, 2 * cap + num_props))
    if background_id_labels:
        s2_mask[:, :cap] = 1.0
    token_ids: list[int | None] = [None] * m

    for gref in turn.refs:
        ref = _offset_ref(gref, offset, cap)
        start, end = ref.span
        if ref.is_new:
            s1_labels[start, 0] = 1.0
            s1_labels[start + 1:end, 1] = 1.0
            for j in range(start, end):
                token_ids[j] = ref.entity_id
        for j in range(start, end):
            s2_labels[j, ref.entity_id] = 1.0
            s2_mask[j, :cap] = 1.0
            base = cap
            s2_labels[j, base + TYPE_INDEX[ref.entity_type]] = 1.0
            s2_labels[j, base + len(TYPE_INDEX) + GENDER_INDEX[ref.gender]] = 1.0
            s2_labels[j, base + len(TYPE_INDEX) + len(GENDER_INDEX)
                      + NUMBER_INDEX[ref.number]] = 1.0
            s2_mask[j, base:base + num_props] = 1.0
            if ref.number == "plural":
                for member in ref.members:
                    s2_labels[j, cap + num_props + member] = 1.0
                s2_mask[j, cap + num_props:] = 1.0

    r_aug, u_aug = encoder.augment_for_stage2(r_rows, u_rows, token_ids)
    return TrainingExample(
        conversation_id=conv.id, turn_index=turn_index,
        r_rows=r_rows, u_rows=u_rows, r_aug=r_aug, u_aug=u_aug,
        s1_labels=s1_labels, s1_mask=s1_mask,
        s2_labels=s2_labels, s2_mask=s2_mask,
    )


def shift_example(ex: TrainingExample, offset: int, layout) -> TrainingExample:
    """Apply an ID shift to a built example by rolling its ID-indexed blocks.

    Equivalent to rebuilding the example with the shifted conversation, but
    much cheaper; the equivalence is covered by a property test.
    """
    if offset == 0:
        return ex
    cap = layout.capacity

    def roll_feature_rows(rows):
        out = rows.copy()
        ids = slice(layout.id_start, layout.id_start + cap)
        mem = slice(layout.members_start, layout.members_start + cap)
        out[:, ids] = np.roll(rows[:, ids], offset, axis=1)
        out[:, mem] = np.roll(rows[:, mem], offset, axis=1)
        return out

    def roll_aug_rows(rows):
        out = roll_feature_rows(rows)
        aug = slice(layout.total_dim, layout.total_dim + cap)
        out[:, aug] = np.roll(rows[:, aug], offset, axis=1)
        return out

    def roll_stage2(rows):
        out = rows.copy()
        ids = slice(0, cap)
        mem = slice(cap + layout.num_properties, 2 * cap + layout.num_properties)
        out[:, ids] = np.roll(rows[:, ids], offset, axis=1)
        out[:, mem] = np.roll(rows[:, mem], offset, axis=1)
        return out

    return replace(
        ex,
        r_rows=roll_feature_rows(ex.r_rows),
        u_rows=ex.u_rows,
        r_aug=roll_aug_rows(ex.r_aug),
        u_aug=roll_aug_rows(ex.u_aug),
        s2_labels=roll_stage2(ex.s2_labels),
        s2_mask=roll_stage2(ex.s2_mask),
    )


def build_examples(corpus, encoder: Encoder, background_id_labels: bool = True,
                   ) -> list[tuple[int, TrainingExample]]:
    """(conversation index, example) pairs for every turn, at zero offset."""
    out = []
    for ci, conv in enumerate(corpus):
        for ti in range(len(conv.turns)):
            out.append((ci, build_example(
                conv, ti, encoder, background_id_labels=background_id_labels)))
    return out


def example_loss_parts(model: TransformerModel, ex: TrainingExample,
                       stage1_weight: float) -> tuple[ad.Tensor, float, float]:
    """Combined loss tensor plus the raw per-token stage losses."""
    s1 = model.stage1_tensor(ex.r_rows, ex.u_rows)
    l1 = ad.scale(ad.hinge_masked_sum(s1, ex.s1_labels, ex.s1_mask),
                  1.0 / ex.num_tokens)
    s2 = model.stage2_tensor(ex.r_aug, ex.u_aug)
    l2 = ad.scale(ad.hinge_masked_sum(s2, ex.s2_labels, ex.s2_mask),
                  1.0 / ex.num_tokens)
    total = ad.add_scalar_tensors(ad.scale(l1, stage1_weight), l2)
    return total, l1.item(), l2.item()


def example_loss(model: TransformerModel, ex: TrainingExample,
                 stage1_weight: float) -> ad.Tensor:
    return example_loss_parts(model, ex, stage1_weight)[0]


def batch_loss_parts(model: TransformerModel, examples, stage1_weight: float,
                     ) -> tuple[ad.Tensor, float, float]:
    total = None
    sum1 = 0.0
    sum2 = 0.0
    for ex in examples:
        piece, l1, l2 = example_loss_parts(model, ex, stage1_weight)
        total = piece if total is None else ad.add_scalar_tensors(total, piece)
        sum1 += l1
        sum2 += l2
    count = len(examples)
    return ad.scale(total, 1.0 / count), sum1 / count, sum2 / count


def batch_loss(model: TransformerModel, examples, stage1_weight: float) -> ad.Tensor:
    return batch_loss_parts(model, examples, stage1_weight)[0]


class AdamOptimizer:
    def __init__(self, params: dict[str, ad.Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.state = {name: (np.zeros(t.data.size), np.zeros(t.data.size))
                      for name, t in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        for name, tensor in self.params.items():
            m, v = self.state[name]
            kernels.adam_step(tensor.data.reshape(-1), grads[name].reshape(-1),
                              m, v, self.step_count,
                              self.lr, self.beta1, self.beta2, self.eps)


@dataclass
class TrainResult:
    model: TransformerModel
    history: list[dict]
    epochs_run: int
    diverged: bool = False
    stopped_early: bool = False


def train(corpus, model: TransformerModel, config: TrainConfig,
          encoder: Encoder | None = None, epoch_callback=None) -> TrainResult:
    """Run the training loop; the model's parameters are updated in place.

    epoch_callback(epoch, entry, model), if given, runs after each epoch and
    may return True to stop training.
    """
    encoder = encoder or Encoder(model.config.layout)
    cap = model.config.layout.capacity
    if config.holdout_fraction > 0.0:
        train_convs, val_convs = split_corpus(
            corpus, config.holdout_fraction, config.seed)
    else:
        train_convs, val_convs = list(corpus), []

    examples = build_examples(train_convs, encoder,
                              config.background_id_labels)
    val_examples = [ex for _, ex in build_examples(
        val_convs, encoder, config.background_id_labels)]
    rng = np.random.default_rng(config.seed)
    optimizer = AdamOptimizer(model.params, config.learning_rate,
                              config.beta1, config.beta2, config.adam_eps)

    history: list[dict] = []
    result = TrainResult(model=model, history=history, epochs_run=0)
    last_good = {name: t.data.copy() for name, t in model.params.items()}
    best_val = np.inf
    since_best = 0

    for epoch in range(config.epochs):
        if config.id_randomization:
            offsets = rng.integers(0, cap, size=len(train_convs))
        else:
            offsets = np.zeros(len(train_convs), dtype=np.int64)
        order = rng.permutation(len(examples))
        epoch_start = time.perf_counter()
        batch_losses = []
        stage1_losses = []
        stage2_losses = []
        broke = False
        for start in range(0, len(order), config.batch_size):
            picked = order[start:start + config.batch_size]
            batch = [shift_example(examples[i][1], int(offsets[examples[i][0]]),
                                   encoder.layout)
                     for i in picked]
            model.zero_grads()
            loss, l1_value, l2_value = batch_loss_parts(
                model, batch, config.stage1_weight)
            value = loss.item()
            if not np.isfinite(value):
                log.warning("loss diverged at epoch %d; restoring last epoch", epoch)
                result.diverged = True
                broke = True
                break
            loss.backward()
            try:
                grads = model.gradients()
            except GradientError as exc:
                log.warning("non-finite gradient in %s at epoch %d; "
                            "restoring last epoch", exc.param_name, epoch)
                result.diverged = True
                broke = True
                break
            optimizer.step(grads)
            batch_losses.append(value)
            stage1_losses.append(l1_value)
            stage2_losses.append(l2_value)
        if broke:
            for name, tensor in model.params.items():
                tensor.data[...] = last_good[name]
            break

        entry = {"epoch": epoch, "loss": float(np.mean(batch_losses)),
                 "loss_stage1": float(np.mean(stage1_losses)),
                 "loss_stage2": float(np.mean(stage2_losses))}
        if val_examples:
            entry["val_loss"] = batch_loss(
                model, val_examples, config.stage1_weight).item()
        history.append(entry)
        result.epochs_run = epoch + 1
        last_good = {name: t.data.copy() for name, t in model.params.items()}
        wall_ms = (time.perf_counter() - epoch_start) * 1000.0
        log.info("epoch %d: loss %.5f stage1 %.5f stage2 %.5f%s "
                 "wall_ms %.1f lr %g",
                 epoch, entry["loss"], entry["loss_stage1"],
                 entry["loss_stage2"],
                 f" val {entry['val_loss']:.5f}" if "val_loss" in entry else "",
                 wall_ms, config.learning_rate)

        if config.checkpoint_dir and (epoch + 1) % config.checkpoint_every == 0:
            path = Path(config.checkpoint_dir) / f"epoch{epoch + 1:04d}.ckpt"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(path, model)

        if val_examples:
            if entry["val_loss"] < best_val - 1e-9:
                best_val = entry["val_loss"]
                since_best = 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    result.stopped_early = True
                    log.info("no holdout improvement for %d epochs; stopping",
                             config.patience)
                    break
        if epoch_callback is not None and epoch_callback(epoch, entry, model):
            result.stopped_early = True
            break
    return result
