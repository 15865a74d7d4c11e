"""Feature encoding: repository references and utterance tokens to vectors.

Every model input row shares one layout of concatenated blocks:

    id          capacity        one-hot entity ID (reference rows only)
    new         1               reference was new in its turn
    properties  7               type(2) + gender(3) + number(2) one-hots
    membership  capacity        member-ID bits for plural references
    role        2               sender / recipient of the current turn
    history     history 'H'     participation recency one-hot
    kind        1               1 = reference row, 0 = token row
    signals     num_signals     lexicon signals (first-name membership)
    word        word_dim        context-free embedding
    context     context_dim     contextual embedding (windowed mean)

Stage two consumes the same rows widened by capacity + 1 trailing columns:
token rows append the stage-one decoded ID one-hot and a bit marking tokens
inside a detected new span; reference rows append zeros.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import EncodingError, SequenceTooLongError
from .repository import EntityReference, Repository

SEQUENCE_BUDGET = 100

TYPE_INDEX = {"person": 0, "location": 1}
GENDER_INDEX = {"female": 0, "male": 1, "unknown": 2}
NUMBER_INDEX = {"singular": 0, "plural": 1}


@dataclass(frozen=True)
class FeatureLayout:
    capacity: int = 20
    history: int = 10
    num_signals: int = 1
    word_dim: int = 64
    context_dim: int = 64

    @property
    def num_properties(self) -> int:
        return len(TYPE_INDEX) + len(GENDER_INDEX) + len(NUMBER_INDEX)

    @property
    def id_start(self) -> int:
        return 0

    @property
    def new_index(self) -> int:
        return self.capacity

    @property
    def props_start(self) -> int:
        return self.capacity + 1

    @property
    def type_start(self) -> int:
        return self.props_start

    @property
    def gender_start(self) -> int:
        return self.props_start + len(TYPE_INDEX)

    @property
    def number_start(self) -> int:
        return self.gender_start + len(GENDER_INDEX)

    @property
    def members_start(self) -> int:
        return self.props_start + self.num_properties

    @property
    def role_start(self) -> int:
        return self.members_start + self.capacity

    @property
    def history_start(self) -> int:
        return self.role_start + 2

    @property
    def kind_index(self) -> int:
        return self.history_start + self.history

    @property
    def signal_start(self) -> int:
        return self.kind_index + 1

    @property
    def word_start(self) -> int:
        return self.signal_start + self.num_signals

    @property
    def context_start(self) -> int:
        return self.word_start + self.word_dim

    @property
    def total_dim(self) -> int:
        return self.context_start + self.context_dim

    @property
    def stage2_dim(self) -> int:
        return self.total_dim + self.capacity + 1


class WordProvider(Protocol):
    dim: int

    def vector(self, token: str) -> np.ndarray: ...


class ContextualProvider(Protocol):
    def contextualize(self, base: np.ndarray) -> np.ndarray: ...


class HashEmbedding:
    """Deterministic pseudo-random unit vectors keyed by token text."""

    def __init__(self, dim: int, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            digest = hashlib.blake2b(
                f"{self.seed}:{token}".encode(), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = rng.standard_normal(self.dim)
            vec /= np.linalg.norm(vec)
            self._cache[token] = vec
        return vec


class PretrainedEmbedding:
    """Word vectors from a table, hashing as the fallback for unknown words."""

    def __init__(self, table: dict[str, np.ndarray], dim: int, seed: int = 0):
        for word, vec in table.items():
            if vec.shape != (dim,):
                raise EncodingError(
                    f"vector for {word!r} has shape {vec.shape}, expected ({dim},)")
        self.dim = dim
        self.table = table
        self._fallback = HashEmbedding(dim, seed)

    def vector(self, token: str) -> np.ndarray:
        vec = self.table.get(token)
        if vec is None:
            return self._fallback.vector(token)
        return vec


def load_word_vectors(path) -> tuple[dict[str, np.ndarray], int]:
    """Read text-format vectors: one `word v1 v2 ...` per line."""
    table: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            parts = line.split()
            if not parts:
                continue
            word = parts[0].lower()
            vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise EncodingError(
                    f"line {line_no}: expected {dim} values, got {vec.shape[0]}")
            table[word] = vec
    if dim is None:
        raise EncodingError(f"no vectors found in {path}")
    return table, dim


class WindowedMeanContextual:
    """Contextual vector = mean of context-free vectors within a window."""

    def __init__(self, window: int = 2):
        if window < 0:
            raise EncodingError("window must be non-negative")
        self.window = window

    def contextualize(self, base: np.ndarray) -> np.ndarray:
        n = base.shape[0]
        out = np.empty_like(base)
        for i in range(n):
            lo = max(0, i - self.window)
            hi = min(n, i + self.window + 1)
            out[i] = base[lo:hi].mean(axis=0)
        return out


def load_first_names() -> frozenset[str]:
    from importlib import resources

    text = resources.files("turntrack").joinpath("data/first_names.txt").read_text()
    return frozenset(line.strip() for line in text.splitlines() if line.strip())


class Encoder:
    """Builds model input rows for (repository, utterance) pairs."""

    def __init__(self, layout: FeatureLayout | None = None,
                 words: WordProvider | None = None,
                 contextual: ContextualProvider | None = None,
                 lexicon: frozenset[str] | None = None,
                 budget: int = SEQUENCE_BUDGET):
        self.layout = layout or FeatureLayout()
        self.words = words or HashEmbedding(self.layout.word_dim)
        self.contextual = contextual or WindowedMeanContextual()
        self.lexicon = load_first_names() if lexicon is None else lexicon
        self.budget = budget
        if self.words.dim != self.layout.word_dim:
            raise EncodingError(
                f"word provider dim {self.words.dim} != layout {self.layout.word_dim}")

    def _span_mean(self, tokens: Sequence[str]) -> np.ndarray:
        vecs = [self.words.vector(t) for t in tokens]
        return np.mean(vecs, axis=0)

    def mention_embedding(self, refs: Sequence[EntityReference],
                          entity_id: int) -> np.ndarray:
        """Mean context-free vector over every span token of the entity."""
        tokens = [t for r in refs if r.entity_id == entity_id for t in r.span_text]
        if not tokens:
            return np.zeros(self.layout.word_dim)
        return self._span_mean(tokens)

    def encode_elements(self, refs: Sequence[EntityReference], tokens: Sequence[str],
                        turn_index: int, role_ids: tuple[int, int],
                        ) -> tuple[np.ndarray, np.ndarray]:
        """Encode reference and token rows for one turn.

        role_ids names the entity IDs acting as (sender, recipient) of the
        turn being encoded.  Raises SequenceTooLongError over budget; callers
        wanting eviction go through encode_turn.
        """
        lay = self.layout
        n, m = len(refs), len(tokens)
        if n + m > self.budget:
            raise SequenceTooLongError(n, m, self.budget)
        r_rows = np.zeros((n, lay.total_dim))
        u_rows = np.zeros((m, lay.total_dim))
        sender_id, recipient_id = role_ids

        mention_cache: dict[int, np.ndarray] = {}
        for i, ref in enumerate(refs):
            row = r_rows[i]
            if ref.entity_id >= lay.capacity:
                raise EncodingError(
                    f"entity ID {ref.entity_id} >= capacity {lay.capacity}")
            row[lay.id_start + ref.entity_id] = 1.0
            if ref.is_new:
                row[lay.new_index] = 1.0
            row[lay.type_start + TYPE_INDEX[ref.entity_type]] = 1.0
            row[lay.gender_start + GENDER_INDEX[ref.gender]] = 1.0
            row[lay.number_start + NUMBER_INDEX[ref.number]] = 1.0
            for member in ref.members:
                if member >= lay.capacity:
                    raise EncodingError(
                        f"member ID {member} >= capacity {lay.capacity}")
                row[lay.members_start + member] = 1.0
            if ref.entity_id == sender_id:
                row[lay.role_start] = 1.0
            elif ref.entity_id == recipient_id:
                row[lay.role_start + 1] = 1.0
            if ref.turn_index >= 0:
                age = turn_index - 1 - ref.turn_index
                if 0 <= age < lay.history:
                    row[lay.history_start + age] = 1.0
            row[lay.kind_index] = 1.0
            if any(t in self.lexicon for t in ref.span_text):
                row[lay.signal_start] = 1.0
            if ref.entity_id not in mention_cache:
                mention_cache[ref.entity_id] = self.mention_embedding(refs, ref.entity_id)
            row[lay.word_start:lay.word_start + lay.word_dim] = mention_cache[ref.entity_id]

        for j, token in enumerate(tokens):
            row = u_rows[j]
            if token in self.lexicon:
                row[lay.signal_start] = 1.0
            row[lay.word_start:lay.word_start + lay.word_dim] = self.words.vector(token)

        base = np.empty((n + m, lay.word_dim))
        for i, ref in enumerate(refs):
            base[i] = self._span_mean(ref.span_text)
        for j, token in enumerate(tokens):
            base[n + j] = self.words.vector(token)
        ctx = self.contextual.contextualize(base)
        if ctx.shape != (n + m, lay.context_dim):
            raise EncodingError(
                f"contextual provider returned shape {ctx.shape}, "
                f"expected {(n + m, lay.context_dim)}")
        r_rows[:, lay.context_start:] = ctx[:n]
        u_rows[:, lay.context_start:] = ctx[n:]
        return r_rows, u_rows

    def encode_turn(self, repo: Repository, tokens: Sequence[str], turn_index: int,
                    sender_entity: int, strict: bool = True,
                    ) -> tuple[np.ndarray, np.ndarray, list[EntityReference]]:
        """Encode a live repository against an incoming utterance.

        Over budget, strict mode raises; lenient mode drops the oldest
        non-participant references from the encoding (the repository itself
        is untouched) and reports them.
        """
        refs = list(repo.refs)
        evicted: list[EntityReference] = []
        if len(refs) + len(tokens) > self.budget:
            if strict:
                raise SequenceTooLongError(len(refs), len(tokens), self.budget)
            idx = 0
            while len(refs) + len(tokens) > self.budget and idx < len(refs):
                if refs[idx].entity_id in (0, 1):
                    idx += 1
                    continue
                evicted.append(refs.pop(idx))
            if len(refs) + len(tokens) > self.budget:
                raise SequenceTooLongError(len(refs), len(tokens), self.budget)
        role_ids = (sender_entity, 1 - sender_entity)
        r_rows, u_rows = self.encode_elements(refs, tokens, turn_index, role_ids)
        return r_rows, u_rows, evicted

    def augment_for_stage2(self, r_rows: np.ndarray, u_rows: np.ndarray,
                           token_ids: Sequence[int | None],
                           ) -> tuple[np.ndarray, np.ndarray]:
        """Widen rows with the stage-one ID assignment for stage-two input."""
        lay = self.layout
        if len(token_ids) != u_rows.shape[0]:
            raise EncodingError(
                f"{len(token_ids)} token IDs for {u_rows.shape[0]} token rows")
        extra = lay.capacity + 1
        r_aug = np.hstack([r_rows, np.zeros((r_rows.shape[0], extra))])
        u_aug = np.hstack([u_rows, np.zeros((u_rows.shape[0], extra))])
        for j, entity_id in enumerate(token_ids):
            if entity_id is None:
                continue
            if entity_id >= lay.capacity:
                raise EncodingError(
                    f"assigned ID {entity_id} >= capacity {lay.capacity}")
            u_aug[j, lay.total_dim + entity_id] = 1.0
            u_aug[j, lay.total_dim + lay.capacity] = 1.0
        return r_aug, u_aug
