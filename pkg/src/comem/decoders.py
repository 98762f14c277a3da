"""Task heads and losses: multiple-choice scoring, count regression, word classification."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError, DomainError
from .tensor import ParameterStore, Tensor

COUNT_MIN = 0
COUNT_MAX = 10
NUM_CHOICES = 5


class TaskKind(str, Enum):
    REPEATING_ACTION = "action"
    STATE_TRANSITION = "trans"
    REPETITION_COUNT = "count"
    FRAME_QA = "frame"

    @property
    def is_multiple_choice(self) -> bool:
        return self in (TaskKind.REPEATING_ACTION, TaskKind.STATE_TRANSITION)

    @property
    def metric_name(self) -> str:
        return "MSE" if self is TaskKind.REPETITION_COUNT else "ACC"


@dataclass
class DecoderParams:
    """W_m (choice score), W_n + b (count), W_w + bias (word classifier)."""

    w_m: Tensor | None = None
    w_n: Tensor | None = None
    b_n: Tensor | None = None
    w_w: Tensor | None = None
    b_w: Tensor | None = None

    @staticmethod
    def create(store: ParameterStore, prefix: str, memory_dim: int, task: TaskKind, answer_vocab: int = 0) -> "DecoderParams":
        p = DecoderParams()
        if task.is_multiple_choice:
            p.w_m = store.add(f"{prefix}.w_m", (memory_dim, 1))
        elif task is TaskKind.REPETITION_COUNT:
            p.w_n = store.add(f"{prefix}.w_n", (memory_dim, 1))
            p.b_n = store.add(f"{prefix}.b_n", (1,), init="zeros")
        else:
            if answer_vocab < 1:
                raise DomainError("word classifier needs a positive answer vocabulary size")
            p.w_w = store.add(f"{prefix}.w_w", (memory_dim, answer_vocab))
            p.b_w = store.add(f"{prefix}.b_w", (answer_vocab,), init="zeros")
        return p


def score_choice(m_h: Tensor, p: DecoderParams) -> Tensor:
    """Real-valued candidate score ``W_m . m_h`` (scalar per row)."""
    s = T.matmul(m_h, p.w_m)
    return T.reshape(s, s.data.shape[:-1])


def hinge_loss(s_p: Tensor, s_n: Sequence[Tensor]) -> Tensor:
    """Mean over incorrect candidates of ``max(0, 1 + s_n - s_p)``."""
    if len(s_n) == 0:
        raise DomainError("hinge_loss: need at least one incorrect-candidate score")
    terms = [T.relu(1.0 + sn - s_p) for sn in s_n]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return T.scale(total, 1.0 / len(s_n))


def count_regression(m_h: Tensor, p: DecoderParams) -> Tensor:
    """Unrounded count estimate ``W_n . m_h + b`` used by the training loss."""
    r = T.matmul(m_h, p.w_n)
    r = T.reshape(r, r.data.shape[:-1])
    return r + T.reshape(p.b_n, ())


def predict_count(m_h: Tensor, p: DecoderParams):
    """Integer prediction: round half-up, clamped to the 11-answer range 0..10."""
    r = count_regression(m_h, p)
    rounded = np.floor(np.asarray(r.data, dtype=np.float64) + 0.5)
    clamped = np.clip(rounded, COUNT_MIN, COUNT_MAX).astype(np.int64)
    return clamped if clamped.ndim else int(clamped)


def l2_count_loss(r: Tensor, y) -> Tensor:
    """Squared error between the unrounded estimate and the integer target."""
    y = np.asarray(y, dtype=r.data.dtype)
    if y.shape != r.data.shape:
        raise DimensionError(f"l2_count_loss: target shape {y.shape} vs estimate {r.data.shape}")
    return T.square(r - Tensor(y))


def classify_word(m_h: Tensor, p: DecoderParams) -> Tensor:
    """Probability distribution over the answer vocabulary."""
    return T.softmax(T.affine(m_h, p.w_w, p.b_w), axis=-1)


def word_logits(m_h: Tensor, p: DecoderParams) -> Tensor:
    return T.affine(m_h, p.w_w, p.b_w)


def cross_entropy_loss(logits: Tensor, target) -> Tensor:
    """Stable cross-entropy from raw logits against integer class targets."""
    target = np.asarray(target)
    lse = T.logsumexp(logits, axis=-1)
    picked = T.select_index(logits, target)
    return lse - picked


def predict_word(m_h: Tensor, p: DecoderParams):
    """Argmax class (ties resolve to the lowest index)."""
    logits = word_logits(m_h, p)
    idx = np.argmax(logits.data, axis=-1)
    return idx if idx.ndim else int(idx)


def answer_multiple_choice(model, features_a, features_b, question_tokens, candidates) -> int:
    """Score each of the 5 candidates with its own conditioned forward pass.

    ``model`` must expose ``score_candidates(features_a, features_b,
    question_tokens, candidates)``.  Returns the argmax index; ties resolve
    to the lowest index.
    """
    if len(candidates) != NUM_CHOICES:
        raise DomainError(f"expected {NUM_CHOICES} candidates, got {len(candidates)}")
    scores = model.score_candidates(features_a, features_b, question_tokens, candidates)
    return int(np.argmax(scores))
