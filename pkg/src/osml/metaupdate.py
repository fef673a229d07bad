"""Buffer replay, per-block meta updates, finetuning and evaluation.

After a pathway commits, each block along it is refreshed from tasks that
share the block: one-step adaptation on a sampled task's support, then the
query-loss gradient at the adapted point is applied to that block's slot
only. Finetuning trains a fresh-head copy of the pathway on support plus
query; evaluation runs the test split.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import graph as gr
from .search import SearchConfig, construct_pathway
from .tasks import derive_rng, derive_seed


@dataclass
class UpdateConfig:
    replay_rounds: int = 5  # low-to-high sweeps over the pathway's layers
    replay_samples: int = 4  # sharing tasks sampled per block update (cap)
    replay_lr: float = 0.001  # outer step on the shared block
    replay_inner_lr: float = 0.01  # one-step support adaptation during replay
    finetune_lr: float = 0.001
    finetune_steps: int = 100
    minibatch_cap: int = 64  # full episodes up to this size, else sub-batches
    loss: str = "cross_entropy"


@dataclass
class TaskRecord:
    task_index: int
    tag: str
    episode: object
    pathway: gr.Pathway


class TaskBuffer:
    """Append-only record of every task seen and its committed pathway."""

    def __init__(self):
        self.records: list = []
        self._seen: set = set()

    def add(self, record: TaskRecord) -> None:
        if record.task_index in self._seen:
            raise ValueError(f"task {record.task_index} already buffered")
        self._seen.add(record.task_index)
        self.records.append(record)

    def sharing(self, block_id: int) -> list:
        return [r for r in self.records if block_id in r.pathway.block_ids]

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


@dataclass
class TaskResult:
    task_index: int
    tag: str
    accuracy: float
    query_loss: float
    blocks_per_layer: list
    pathway: gr.Pathway
    wall_ms: float = 0.0


def minibatch(x: np.ndarray, y: np.ndarray, cap: int, rng) -> tuple:
    """The full batch when it fits the cap, else a uniform sub-batch."""
    n = x.shape[0]
    if n <= cap:
        return x, y
    idx = rng.permutation(n)[:cap]
    return x[idx], y[idx]


def sample_sharing_tasks(buffer: TaskBuffer, block_id: int, k: int, rng) -> list:
    """Up to k tasks drawn uniformly with replacement among those whose
    pathway contains the block."""
    sharing = buffer.sharing(block_id)
    if not sharing:
        raise ValueError(f"no buffered task shares block {block_id}")
    k_eff = min(k, len(sharing))
    idx = rng.integers(0, len(sharing), size=k_eff)
    return [sharing[i] for i in idx]


def _pathway_loss(graph, pathway, params, x, y, loss_kind):
    tape = ad.Tape()
    leaves = tape.leaves(params)
    logits = gr.pathway_forward(graph, pathway, leaves, tape.leaf(x))
    return ad.loss(loss_kind, logits, y), leaves


def replay_adapt_grads(graph, record: TaskRecord, cfg: UpdateConfig, rng) -> dict:
    """One replay pass for a sampled task: fresh head, one-step support
    adaptation of the recorded pathway, query-loss gradients at the adapted
    point. rng draws, in order: support minibatch, then query minibatch."""
    head = gr.init_head(graph)
    blocks = gr.pathway_blocks(graph, record.pathway)
    params = dict(gr.collect_params(graph, blocks, include_head=False))
    params["head/weight"] = head["weight"]
    params["head/bias"] = head["bias"]
    ep = record.episode
    sx, sy = minibatch(ep.support_x, ep.support_y, cfg.minibatch_cap, rng)
    qx, qy = minibatch(ep.query_x, ep.query_y, cfg.minibatch_cap, rng)
    loss_t, leaves = _pathway_loss(graph, record.pathway, params, sx, sy, cfg.loss)
    adapted = ad.sgd_step(params, ad.backward(loss_t, leaves), cfg.replay_inner_lr)
    loss_q, leaves_q = _pathway_loss(graph, record.pathway, adapted, qx, qy, cfg.loss)
    return ad.backward(loss_q, leaves_q)


def block_meta_update(
    graph, layer: int, block_id: int, buffer: TaskBuffer, cfg: UpdateConfig,
    rng, journal=None, task_index: int = -1,
) -> None:
    """Refresh one block from its sharing tasks; only that block changes."""
    records = sample_sharing_tasks(buffer, block_id, cfg.replay_samples, rng)
    block = graph.find_block(block_id)
    total = {name: np.zeros_like(arr) for name, arr in block.params.items()}
    for rec in records:
        grads = replay_adapt_grads(graph, rec, cfg, rng)
        for name in total:
            total[name] += grads[gr.param_path(layer, block_id, name)]
    block.params = {
        name: block.params[name] - cfg.replay_lr * total[name] for name in total
    }
    if journal is not None:
        sq = sum(float(np.sum((cfg.replay_lr * g) ** 2)) for g in total.values())
        journal.write(f"{task_index} {layer} {block_id} {np.sqrt(sq):.8e}\n")


def meta_update_pathway(
    graph, pathway: gr.Pathway, buffer: TaskBuffer, cfg: UpdateConfig,
    rng, journal=None, task_index: int = -1,
) -> None:
    """replay_rounds sweeps over the pathway's layers, low to high."""
    for _ in range(cfg.replay_rounds):
        for layer in range(graph.n_layers):
            block_meta_update(
                graph, layer, pathway.block_ids[layer], buffer, cfg, rng,
                journal=journal, task_index=task_index,
            )


def finetune_pathway(graph, pathway: gr.Pathway, episode, cfg: UpdateConfig, rng) -> dict:
    """Train a copy of the pathway plus a fresh head on support + query."""
    head = gr.init_head(graph)
    blocks = gr.pathway_blocks(graph, pathway)
    params = dict(gr.collect_params(graph, blocks, include_head=False))
    params["head/weight"] = head["weight"]
    params["head/bias"] = head["bias"]
    x = np.concatenate([episode.support_x, episode.query_x])
    y = np.concatenate([episode.support_y, episode.query_y])
    for _ in range(cfg.finetune_steps):
        loss_t, leaves = _pathway_loss(graph, pathway, params, x, y, cfg.loss)
        params = ad.sgd_step(params, ad.backward(loss_t, leaves), cfg.finetune_lr)
    return params


def evaluate(graph, pathway: gr.Pathway, params: dict, x, y, loss_kind="cross_entropy"):
    """(accuracy, loss) of fixed parameters on one split; accuracy is NaN
    for regression losses."""
    tape = ad.Tape()
    leaves = tape.leaves(params)
    logits = gr.pathway_forward(graph, pathway, leaves, tape.leaf(x))
    loss_t = ad.loss(loss_kind, logits, y)
    if loss_kind == "cross_entropy":
        acc = float(np.mean(np.argmax(logits.data, axis=1) == y))
    else:
        acc = float("nan")
    return acc, float(loss_t.data)


def run_osml_task(
    graph, buffer: TaskBuffer, episode, search_cfg: SearchConfig,
    update_cfg: UpdateConfig, rng, task_index: int, journal=None,
) -> TaskResult:
    """Full per-task pipeline: search and commit a pathway, record the task,
    replay-update its blocks, finetune, evaluate on the test split."""
    pathway, _ = construct_pathway(graph, episode, search_cfg, rng, task_index)
    buffer.add(TaskRecord(task_index, episode.tag, episode, pathway))
    meta_update_pathway(
        graph, pathway, buffer, update_cfg, rng, journal=journal, task_index=task_index
    )
    params = finetune_pathway(graph, pathway, episode, update_cfg, rng)
    accuracy, _ = evaluate(
        graph, pathway, params, episode.test_x, episode.test_y, update_cfg.loss
    )
    _, query_loss = evaluate(
        graph, pathway, params, episode.query_x, episode.query_y, update_cfg.loss
    )
    return TaskResult(
        task_index, episode.tag, accuracy, query_loss, graph.block_counts(), pathway
    )


def run_osml_stream(
    specs, input_shape, n_classes, stream, search_cfg: SearchConfig,
    update_cfg: UpdateConfig, seed: int, journal=None,
):
    """Run the full pipeline over a task stream.

    Model init uses derive_seed(seed, 0) and the sequential task rng is
    derive_rng(seed, 1); every method runner shares this convention so
    methods with the same seed start from the same initial parameters.
    """
    graph = gr.init_graph(specs, input_shape, n_classes, derive_seed(seed, 0))
    rng = derive_rng(seed, 1)
    buffer = TaskBuffer()
    results = []
    for t, episode in enumerate(stream):
        t0 = time.perf_counter()
        res = run_osml_task(
            graph, buffer, episode, search_cfg, update_cfg, rng, t, journal=journal
        )
        res.wall_ms = (time.perf_counter() - t0) * 1000.0
        results.append(res)
    return results, graph
