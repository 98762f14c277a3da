"""Dual-memory episodic loop over two fact modalities.

Each cycle: cross-modal gate generation, per-step soft fusion of pyramid
levels, gate-driven GRU encoding of the fused fact sequence, and a ReLU
affine update of each modality's memory from [memory, question, context].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import GruParams, attention_gru_encode
from .errors import DimensionError, DomainError
from .facts import ContextualFactSet
from .tensor import ParameterStore, Tensor


@dataclass
class MemoryState:
    m_a: Tensor
    m_b: Tensor
    cycle: int = 0


@dataclass
class AttentionMaps:
    """Raw gates and both softmax normalizations for one cycle.

    ``ga``/``gb``: (..., N, L) raw gates.  ``sa_levels``/``sb_levels``:
    softmax over the level axis (columns sum to 1).  ``sa_steps``/
    ``sb_steps``: softmax over the step axis of the level-mean gate.
    """

    ga: Tensor
    gb: Tensor
    sa_levels: Tensor
    sb_levels: Tensor
    sa_steps: Tensor
    sb_steps: Tensor
    cycle: int = 0

    def export(self) -> dict:
        def tolist(t: Tensor):
            return np.asarray(t.data, dtype=np.float64).tolist()

        return {
            "cycle": self.cycle,
            "appearance": {"levels": tolist(self.sa_levels), "steps": tolist(self.sa_steps)},
            "motion": {"levels": tolist(self.sb_levels), "steps": tolist(self.sb_steps)},
        }


@dataclass
class CoMemoryParams:
    """Attention weights, memory projections/updates, and fact-encoding GRUs."""

    w_a1: Tensor
    w_a2: Tensor
    w_a3: Tensor
    w_a4: Tensor
    w_b1: Tensor
    w_b2: Tensor
    w_b3: Tensor
    w_b4: Tensor
    proj_a: Tensor
    proj_b: Tensor
    upd_a_w: Tensor
    upd_a_b: Tensor
    upd_b_w: Tensor
    upd_b_b: Tensor
    gru_a: GruParams
    gru_b: GruParams

    @property
    def memory_dim(self) -> int:
        return self.proj_a.data.shape[1]

    @staticmethod
    def create(
        store: ParameterStore,
        prefix: str,
        fact_dim: int,
        memory_dim: int,
        question_dim: int,
        gate_dim: int,
        context_dim: int,
    ) -> "CoMemoryParams":
        mq = memory_dim + question_dim

        def attn(mod):
            return (
                store.add(f"{prefix}.w_{mod}1", (mq, fact_dim)),
                store.add(f"{prefix}.w_{mod}2", (fact_dim, gate_dim)),
                store.add(f"{prefix}.w_{mod}3", (mq, gate_dim)),
                store.add(f"{prefix}.w_{mod}4", (gate_dim, 1)),
            )

        w_a1, w_a2, w_a3, w_a4 = attn("a")
        w_b1, w_b2, w_b3, w_b4 = attn("b")
        upd_in = memory_dim + question_dim + context_dim
        return CoMemoryParams(
            w_a1=w_a1, w_a2=w_a2, w_a3=w_a3, w_a4=w_a4,
            w_b1=w_b1, w_b2=w_b2, w_b3=w_b3, w_b4=w_b4,
            proj_a=store.add(f"{prefix}.proj_a", (question_dim, memory_dim)),
            proj_b=store.add(f"{prefix}.proj_b", (question_dim, memory_dim)),
            upd_a_w=store.add(f"{prefix}.upd_a_w", (upd_in, memory_dim)),
            upd_a_b=store.add(f"{prefix}.upd_a_b", (memory_dim,), init="zeros"),
            upd_b_w=store.add(f"{prefix}.upd_b_w", (upd_in, memory_dim)),
            upd_b_b=store.add(f"{prefix}.upd_b_b", (memory_dim,), init="zeros"),
            gru_a=GruParams.create(store, f"{prefix}.gru_a", fact_dim, context_dim),
            gru_b=GruParams.create(store, f"{prefix}.gru_b", fact_dim, context_dim),
        )


def init_memory(q: Tensor, p: CoMemoryParams) -> MemoryState:
    """Initial memories: separate learned ReLU projections of the question."""
    return MemoryState(
        m_a=T.relu(T.matmul(q, p.proj_a)),
        m_b=T.relu(T.matmul(q, p.proj_b)),
        cycle=0,
    )


def fact_projections(A: ContextualFactSet, B: ContextualFactSet, p: CoMemoryParams) -> tuple[Tensor, Tensor]:
    """Facts projected through the second attention weight, once per forward.

    ``tanh(W2 (f + inner))`` distributes to ``tanh(W2 f + W2 inner)``; the
    ``W2 f`` term is memory-independent so it can be shared by every cycle
    (and every candidate run on the same video).
    """
    return T.matmul(A.stacked(), p.w_a2), T.matmul(B.stacked(), p.w_b2)


def _gates_one_modality(facts_proj: Tensor, m_inner: Tensor, m_outer: Tensor, q: Tensor, w1, w2, w3, w4) -> Tensor:
    """Raw gates for all levels/steps of one modality.

    ``facts_proj``: (..., N, L, Z), the facts already multiplied by ``w2``.
    Inner term uses the modality's own memory, outer term the other
    modality's memory.  Returns (..., N, L).
    """
    inner = T.matmul(T.matmul(T.concat([m_inner, q], axis=-1), w1), w2)  # (..., Z)
    outer = T.matmul(T.concat([m_outer, q], axis=-1), w3)  # (..., Z)
    if facts_proj.data.ndim == 4:  # batched: broadcast over (N, L)
        inner = T.reshape(inner, (inner.data.shape[0], 1, 1, inner.data.shape[-1]))
        outer = T.reshape(outer, (outer.data.shape[0], 1, 1, outer.data.shape[-1]))
    z = T.tanh(facts_proj + inner)
    g = T.matmul(z + outer, w4)
    return T.reshape(g, g.data.shape[:-1])


def co_attention(
    A: ContextualFactSet,
    B: ContextualFactSet,
    m: MemoryState,
    q: Tensor,
    p: CoMemoryParams,
    facts_proj: tuple[Tensor, Tensor] | None = None,
) -> AttentionMaps:
    """Cross-modal gates plus the level-axis and step-axis softmaxes."""
    if A.num_levels != B.num_levels or A.length != B.length:
        raise DimensionError(
            f"co_attention: fact sets disagree: {A.num_levels}x{A.length} vs {B.num_levels}x{B.length}"
        )
    if facts_proj is None:
        facts_proj = fact_projections(A, B, p)
    fa_p, fb_p = facts_proj
    ga = _gates_one_modality(fa_p, m.m_a, m.m_b, q, p.w_a1, p.w_a2, p.w_a3, p.w_a4)
    gb = _gates_one_modality(fb_p, m.m_b, m.m_a, q, p.w_b1, p.w_b2, p.w_b3, p.w_b4)
    sa_levels = T.softmax(ga, axis=-2)
    sb_levels = T.softmax(gb, axis=-2)
    sa_steps = T.softmax(T.tmean(ga, axis=-2), axis=-1)
    sb_steps = T.softmax(T.tmean(gb, axis=-2), axis=-1)
    return AttentionMaps(ga=ga, gb=gb, sa_levels=sa_levels, sb_levels=sb_levels,
                         sa_steps=sa_steps, sb_steps=sb_steps, cycle=m.cycle + 1)


def dynamic_fact_ensemble(F: ContextualFactSet, s_levels: Tensor) -> Tensor:
    """Per-step weighted average of levels: ``f_j = sum_i s[i, j] f_j^i``."""
    stacked = F.stacked()  # (..., N, L, C)
    if s_levels.data.shape != stacked.data.shape[:-1]:
        raise DimensionError(f"dynamic_fact_ensemble: weights {s_levels.shape} vs facts {stacked.shape}")
    col_sums = s_levels.data.sum(axis=-2)
    if np.abs(col_sums - 1.0).max() > 1e-4:
        raise DomainError(f"dynamic_fact_ensemble: level weights must sum to 1 per step (max deviation {np.abs(col_sums - 1.0).max():.2e})")
    weighted = T.mul(stacked, T.reshape(s_levels, s_levels.data.shape + (1,)))
    return T.tsum(weighted, axis=-3)


def memory_cycle(
    A: ContextualFactSet,
    B: ContextualFactSet,
    m: MemoryState,
    q: Tensor,
    p: CoMemoryParams,
    force_zero_gates: bool = False,
    facts_proj: tuple[Tensor, Tensor] | None = None,
) -> tuple[MemoryState, AttentionMaps, Tensor, Tensor]:
    """One attention / ensemble / encode / update cycle for both modalities.

    ``force_zero_gates`` is a test hook that zeroes the step gates before
    fact encoding, making both contextual vectors exactly zero.
    """
    maps = co_attention(A, B, m, q, p, facts_proj=facts_proj)
    ens_a = dynamic_fact_ensemble(A, maps.sa_levels)
    ens_b = dynamic_fact_ensemble(B, maps.sb_levels)
    sa, sb = maps.sa_steps, maps.sb_steps
    if force_zero_gates:
        sa = Tensor(np.zeros_like(sa.data))
        sb = Tensor(np.zeros_like(sb.data))
    c_a = attention_gru_encode(ens_a, sa, p.gru_a)
    c_b = attention_gru_encode(ens_b, sb, p.gru_b)
    m_a = T.relu(T.affine(T.concat([m.m_a, q, c_a], axis=-1), p.upd_a_w, p.upd_a_b))
    m_b = T.relu(T.affine(T.concat([m.m_b, q, c_b], axis=-1), p.upd_b_w, p.upd_b_b))
    return MemoryState(m_a=m_a, m_b=m_b, cycle=m.cycle + 1), maps, c_a, c_b


def run_episodes(
    A: ContextualFactSet,
    B: ContextualFactSet,
    q: Tensor,
    p: CoMemoryParams,
    cycles: int = 2,
    facts_proj: tuple[Tensor, Tensor] | None = None,
) -> tuple[Tensor, list[AttentionMaps]]:
    """Iterate ``cycles`` memory updates; returns [m_a^T ; m_b^T] and all maps."""
    if cycles < 1:
        raise DomainError(f"run_episodes: cycles must be >= 1, got {cycles}")
    if facts_proj is None:
        facts_proj = fact_projections(A, B, p)
    m = init_memory(q, p)
    all_maps = []
    for _ in range(cycles):
        m, maps, _, _ = memory_cycle(A, B, m, q, p, facts_proj=facts_proj)
        all_maps.append(maps)
    return T.concat([m.m_a, m.m_b], axis=-1), all_maps
