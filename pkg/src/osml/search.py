"""Per-task pathway construction by relaxed differentiable search.

Each task spawns one novel candidate per layer, runs a few meta rounds of
the soft mixture (adapt on support, then first-order meta steps on block
initials and importance logits from the query loss), and commits the
argmax pathway. Adapted parameters are treated as fresh leaves, so no
second-order terms are ever formed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import graph as gr


@dataclass
class SearchConfig:
    inner_lr: float = 0.01  # support adaptation step size
    inner_steps: int = 1
    search_rounds: int = 10  # soft-mixture meta rounds per task
    lr_blocks: float = 0.001  # meta step on block initials
    lr_importance: float = 0.01  # meta step on importance logits
    spawn_novel: bool = True
    loss: str = "cross_entropy"
    second_order: bool = False  # reserved; only the first-order path exists

    def __post_init__(self):
        if self.second_order:
            raise NotImplementedError("second-order search is reserved but not implemented")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.search_rounds < 0:
            raise ValueError("search_rounds must be >= 0")


def _mixture_loss(graph, importance_arrays, params, x, y, loss_kind, dtype=np.float32):
    """Forward the soft mixture on one batch; returns tape pieces."""
    tape = ad.Tape(dtype)
    leaves = tape.leaves(params)
    imp_leaves = [tape.leaf(v) for v in importance_arrays]
    logits = gr.mixed_forward(graph, imp_leaves, leaves, tape.leaf(x))
    loss_t = ad.loss(loss_kind, logits, y)
    return tape, leaves, imp_leaves, loss_t


def inner_adapt(graph, importance_arrays, support, params, cfg: SearchConfig):
    """Adapt a copy of params on the support set with the mixture held at
    the current importance. Never mutates the inputs."""
    x, y = support
    adapted = params
    for _ in range(cfg.inner_steps):
        tape, leaves, _, loss_t = _mixture_loss(
            graph, importance_arrays, adapted, x, y, cfg.loss
        )
        grads = ad.backward(loss_t, leaves)
        adapted = ad.sgd_step(adapted, grads, cfg.inner_lr)
    return adapted


def meta_search_step(graph, importance_arrays, support, query, cfg: SearchConfig) -> float:
    """One search round: adapt on support, take the query-loss gradient at
    the adapted point, and step block initials (in the graph, in place) and
    importance logits (returned arrays are replaced in the list). Returns
    the query loss before the step."""
    params = gr.collect_params(graph, gr.all_active_blocks(graph))
    adapted = inner_adapt(graph, importance_arrays, support, params, cfg)
    qx, qy = query
    tape, leaves, imp_leaves, loss_t = _mixture_loss(
        graph, importance_arrays, adapted, qx, qy, cfg.loss
    )
    grads = ad.backward(loss_t, leaves)
    gr.apply_params(graph, ad.sgd_step(params, grads, cfg.lr_blocks))
    for l, imp_leaf in enumerate(imp_leaves):
        importance_arrays[l] = importance_arrays[l] - cfg.lr_importance * tape.grad(imp_leaf)
    return float(loss_t.data)


def construct_pathway(graph, episode, cfg: SearchConfig, rng, task_index: int):
    """Spawn, search, select, commit. Returns (pathway, last query loss).

    With search_rounds == 0 and spawning off this is a pure lookup: the
    tie-break pathway (lowest block index per layer) with the graph, head
    and rng untouched.
    """
    support = (episode.support_x, episode.support_y)
    query = (episode.query_x, episode.query_y)
    if cfg.search_rounds > 0:
        graph.head = gr.init_head(graph)
    if cfg.spawn_novel:
        gr.spawn_novel_candidates(graph, rng)
    importance = gr.init_importance(graph)
    last_loss = float("nan")
    for _ in range(cfg.search_rounds):
        last_loss = meta_search_step(graph, importance, support, query, cfg)
    selected = gr.select_pathway(graph, importance)
    pathway = gr.commit(graph, selected, task_index)
    return pathway, last_loss
