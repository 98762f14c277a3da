"""Full-model gradient-check harness (wide precision, random synthetic inputs)."""

from __future__ import annotations

import numpy as np

from .decoders import NUM_CHOICES, TaskKind
from .model import CoMemoryModel, ModelConfig, pad_token_batch, tiny_model_config
from .tensor import WIDE_DTYPE


def default_check_config(task: str) -> ModelConfig:
    """Paper dimensions with a small vocabulary (inputs are random anyway)."""
    return ModelConfig(task=task, vocab_size=40, answer_vocab=8)


def build_gradcheck_case(task: str, seed: int = 0, size: str = "tiny", batch: int = 2):
    """Returns (f, tensors): a scalar loss closure over a float64 model.

    ``f`` re-runs the full forward pass (pyramid, episodes, decoder, loss)
    on a fixed random batch, so finite differences see every parameter.
    """
    cfg = tiny_model_config(task) if size == "tiny" else default_check_config(task)
    model = CoMemoryModel(cfg, seed=seed, dtype=WIDE_DTYPE)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed + 17)))
    L = cfg.resolution
    batch_dict = {
        "features_a": rng.standard_normal((batch, L, cfg.input_width_a)),
        "features_b": rng.standard_normal((batch, L, cfg.input_width_b)),
    }
    q_len = 4
    questions = [list(rng.integers(0, cfg.vocab_size, size=q_len)) for _ in range(batch)]
    batch_dict["q_ids"], batch_dict["q_mask"] = pad_token_batch(questions)
    kind = TaskKind(task)
    if kind.is_multiple_choice:
        cands = [list(rng.integers(0, cfg.vocab_size, size=2)) for _ in range(batch * NUM_CHOICES)]
        ids, mask = pad_token_batch(cands)
        batch_dict["cand_ids"] = ids.reshape(batch, NUM_CHOICES, -1)
        batch_dict["cand_mask"] = mask.reshape(batch, NUM_CHOICES, -1)
        batch_dict["answers"] = rng.integers(0, NUM_CHOICES, size=batch)
    elif kind is TaskKind.REPETITION_COUNT:
        batch_dict["answers"] = rng.integers(0, 11, size=batch)
    else:
        batch_dict["answers"] = rng.integers(0, cfg.answer_vocab, size=batch)

    def f():
        loss, _ = model.forward_loss(batch_dict)
        return loss

    return f, model.store.tensors()
