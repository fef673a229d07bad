"""Baseline learners sharing the OSML model family and evaluation protocol.

NT trains a fresh model per task on support only. FT carries its body
across tasks (head re-initialized per task) and trains on support plus
query. FTML keeps one shared first-order meta-initialization refreshed by
buffer replay. Large variants widen every layer by a given factor.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import graph as gr
from .metaupdate import (
    TaskBuffer,
    TaskRecord,
    TaskResult,
    UpdateConfig,
    _pathway_loss,
    evaluate,
    finetune_pathway,
    replay_adapt_grads,
)
from .tasks import derive_rng, derive_seed


@dataclass
class TrainConfig:
    """Plain per-task SGD used by NT and FT."""

    lr: float = 0.01
    steps: int = 100
    loss: str = "cross_entropy"


@dataclass
class FtmlConfig:
    meta_steps: int = 5
    sample: int = 4
    inner_lr: float = 0.01
    outer_lr: float = 0.001
    finetune_lr: float = 0.001
    finetune_steps: int = 100
    minibatch_cap: int = 64
    loss: str = "cross_entropy"


def single_pathway(graph: gr.MetaGraph) -> gr.Pathway:
    return gr.Pathway(tuple(layer[0].block_id for layer in graph.layers))


def widen_specs(specs, factors) -> list:
    """Per-layer width multipliers, e.g. final OSML block counts."""
    if len(factors) != len(specs):
        raise ValueError("need one width factor per layer")
    return [replace(s, width=s.width * int(f)) for s, f in zip(specs, factors)]


def _train(graph, pathway, params, x, y, lr, steps, loss_kind):
    for _ in range(steps):
        loss_t, leaves = _pathway_loss(graph, pathway, params, x, y, loss_kind)
        params = ad.sgd_step(params, ad.backward(loss_t, leaves), lr)
    return params


def _result(graph, pathway, params, episode, t, loss_kind, t0) -> TaskResult:
    accuracy, _ = evaluate(graph, pathway, params, episode.test_x, episode.test_y, loss_kind)
    _, query_loss = evaluate(graph, pathway, params, episode.query_x, episode.query_y, loss_kind)
    return TaskResult(
        t, episode.tag, accuracy, query_loss, graph.block_counts(), pathway,
        wall_ms=(time.perf_counter() - t0) * 1000.0,
    )


def run_nt(specs, input_shape, n_classes, stream, cfg: TrainConfig, seed: int):
    """Fresh model per task, trained on the support split only."""
    results = []
    for t, ep in enumerate(stream):
        t0 = time.perf_counter()
        graph = gr.init_graph(specs, input_shape, n_classes, derive_seed(seed, 0, t))
        pathway = single_pathway(graph)
        params = gr.collect_params(graph, gr.pathway_blocks(graph, pathway))
        params = _train(graph, pathway, params, ep.support_x, ep.support_y, cfg.lr, cfg.steps, cfg.loss)
        results.append(_result(graph, pathway, params, ep, t, cfg.loss, t0))
    return results


def run_ft(specs, input_shape, n_classes, stream, cfg: TrainConfig, seed: int):
    """One carried body; per task the head is re-initialized and the whole
    model trains on support plus query, updates persisting into the next task."""
    graph = gr.init_graph(specs, input_shape, n_classes, derive_seed(seed, 0))
    pathway = single_pathway(graph)
    results = []
    for t, ep in enumerate(stream):
        t0 = time.perf_counter()
        graph.head = gr.init_head(graph)
        params = gr.collect_params(graph, gr.pathway_blocks(graph, pathway))
        x = np.concatenate([ep.support_x, ep.query_x])
        y = np.concatenate([ep.support_y, ep.query_y])
        params = _train(graph, pathway, params, x, y, cfg.lr, cfg.steps, cfg.loss)
        gr.apply_params(graph, params)
        results.append(_result(graph, pathway, params, ep, t, cfg.loss, t0))
    return results


def _ftml_replay_cfg(cfg: FtmlConfig) -> UpdateConfig:
    return UpdateConfig(
        replay_inner_lr=cfg.inner_lr,
        minibatch_cap=cfg.minibatch_cap,
        finetune_lr=cfg.finetune_lr,
        finetune_steps=cfg.finetune_steps,
        loss=cfg.loss,
    )


def run_ftml(specs, input_shape, n_classes, stream, cfg: FtmlConfig, seed: int):
    """Shared meta-initialization with buffer replay.

    Per task: record it, then meta_steps rounds of [sample tasks with
    replacement, one-step inner adaptation on support, first-order query
    gradient at the adapted point applied to every body parameter at once];
    the head is excluded since it is re-initialized per task. Finetune and
    evaluation match the OSML pipeline.
    """
    graph = gr.init_graph(specs, input_shape, n_classes, derive_seed(seed, 0))
    pathway = single_pathway(graph)
    rng = derive_rng(seed, 1)
    buffer = TaskBuffer()
    rcfg = _ftml_replay_cfg(cfg)
    body_paths = [
        gr.param_path(b.layer, b.block_id, name)
        for b in gr.pathway_blocks(graph, pathway)
        for name in b.params
    ]
    results = []
    for t, ep in enumerate(stream):
        t0 = time.perf_counter()
        buffer.add(TaskRecord(t, ep.tag, ep, pathway))
        for _ in range(cfg.meta_steps):
            k_eff = min(cfg.sample, len(buffer))
            idx = rng.integers(0, len(buffer), size=k_eff)
            total = None
            for i in idx:
                grads = replay_adapt_grads(graph, buffer.records[i], rcfg, rng)
                if total is None:
                    total = {p: grads[p].copy() for p in body_paths}
                else:
                    for p in body_paths:
                        total[p] += grads[p]
            body = gr.collect_params(graph, gr.pathway_blocks(graph, pathway), include_head=False)
            gr.apply_params(graph, ad.sgd_step(body, total, cfg.outer_lr))
        params = finetune_pathway(graph, pathway, ep, rcfg, rng)
        results.append(_result(graph, pathway, params, ep, t, cfg.loss, t0))
    return results


def regret(alg_losses, comparator_losses) -> float:
    """Cumulative loss gap against a fixed comparator, summed over tasks."""
    if len(alg_losses) != len(comparator_losses):
        raise ValueError("regret needs one comparator loss per task loss")
    return float(sum(a - c for a, c in zip(alg_losses, comparator_losses)))


def retrospective_comparator(
    specs, input_shape, n_classes, stream, cfg: FtmlConfig, seed: int, epochs: int = 3
):
    """Approximate best-in-hindsight initialization: first-order replay
    epochs over the whole stream, then per task a support-only finetune and
    the resulting query loss. Labeled an approximation, not the true optimum."""
    graph = gr.init_graph(specs, input_shape, n_classes, derive_seed(seed, 0))
    pathway = single_pathway(graph)
    rng = derive_rng(seed, 2)
    rcfg = _ftml_replay_cfg(cfg)
    records = [TaskRecord(t, ep.tag, ep, pathway) for t, ep in enumerate(stream)]
    body_paths = [
        gr.param_path(b.layer, b.block_id, name)
        for b in gr.pathway_blocks(graph, pathway)
        for name in b.params
    ]
    for _ in range(epochs):
        for i in rng.permutation(len(records)):
            grads = replay_adapt_grads(graph, records[i], rcfg, rng)
            body = gr.collect_params(graph, gr.pathway_blocks(graph, pathway), include_head=False)
            gr.apply_params(
                graph, ad.sgd_step(body, {p: grads[p] for p in body_paths}, cfg.outer_lr)
            )
    losses = []
    for ep in stream:
        head = gr.init_head(graph)
        params = dict(gr.collect_params(graph, gr.pathway_blocks(graph, pathway), include_head=False))
        params["head/weight"] = head["weight"]
        params["head/bias"] = head["bias"]
        params = _train(
            graph, pathway, params, ep.support_x, ep.support_y,
            cfg.finetune_lr, cfg.finetune_steps, cfg.loss,
        )
        _, q = evaluate(graph, pathway, params, ep.query_x, ep.query_y, cfg.loss)
        losses.append(q)
    return losses
