"""Experiment orchestration: config files, per-cell runs, metrics CSV,
summaries (mean accuracy, 95% CI, average ranking), selection reports,
and sample-budget sweeps.

Configs are flat UTF-8 key=value files with dotted keys and # comments.
Unknown keys are rejected with their line number; every key has a
documented default, so an empty file is a valid config. The resolved
config is echoed next to the outputs. Output roots honor the
OSML_OUTPUT_ROOT environment variable.
"""

from __future__ import annotations

import csv
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import baselines as bl
from . import graph as gr
from . import metaupdate as mu
from . import search
from . import tasks as tk

METRICS_FIELDS = (
    "method", "seed", "task_index", "tag", "accuracy", "query_loss",
    "blocks_per_layer", "wall_ms",
)
SUMMARY_FIELDS = ("method", "tag", "mean_acc", "ci95", "ar")
KNOWN_METHODS = ("osml", "ftml", "nt", "ft", "ftml_large", "nt_large", "ft_large")


@dataclass
class ExperimentConfig:
    stream_kind: str = "synthetic"  # synthetic | rainbow | idx_modes
    stream_n_modes: int = 3
    stream_tasks_per_mode: int = 20
    stream_n_classes: int = 5
    stream_dims: int = 24
    stream_signal_dims: int = 8
    stream_support_per_class: int = 10
    stream_query_per_class: int = 10
    stream_test_per_class: int = 20
    stream_noise: float = 0.5
    stream_distractor_scale: float = 2.0
    stream_bias_scale: float = 1.5
    stream_images: str = ""  # rainbow: IDX image file
    stream_labels: str = ""  # rainbow: IDX label file
    stream_root: str = ""  # idx_modes: directory of per-mode IDX pairs

    model_layers: int = 2
    model_kind: str = "dense"
    model_width: int = 16
    model_kernel_size: int = 3
    model_stride: int = 1
    model_padding: int = 1
    model_batch_norm: bool = True
    model_activation: str = "relu"

    methods: tuple = ("osml", "ftml", "nt")
    seeds: tuple = (0, 1, 2, 3, 4)
    loss: str = "cross_entropy"

    osml_inner_lr: float = 0.01
    osml_inner_steps: int = 1
    osml_search_rounds: int = 10
    osml_lr_blocks: float = 0.001
    osml_lr_importance: float = 0.01
    osml_spawn_novel: bool = True
    osml_replay_rounds: int = 5
    osml_replay_samples: int = 4
    osml_replay_lr: float = 0.001
    osml_replay_inner_lr: float = 0.01
    osml_finetune_lr: float = 0.001
    osml_finetune_steps: int = 100
    osml_minibatch_cap: int = 64

    ftml_meta_steps: int = 5
    ftml_sample: int = 4
    ftml_inner_lr: float = 0.01
    ftml_outer_lr: float = 0.001
    ftml_finetune_lr: float = 0.001
    ftml_finetune_steps: int = 100
    ftml_minibatch_cap: int = 64

    nt_lr: float = 0.01
    nt_steps: int = 100
    ft_lr: float = 0.01
    ft_steps: int = 100

    output_dir: str = "runs/experiment"
    report_timing: bool = True
    report_svg: bool = True
    sweep_sizes: tuple = (10, 20, 40)
    sweep_target: float = 0.9


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> tuple:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _parse_str_list(text: str) -> tuple:
    return tuple(p.strip() for p in text.split(",") if p.strip())


# dotted config key -> (ExperimentConfig field, parser). The field's
# declared default is the documented default.
_KEYS = {}
for _f in fields(ExperimentConfig):
    _dotted = _f.name.replace("_", ".", 1) if "_" in _f.name else _f.name
    if _f.name in ("methods", "seeds", "loss"):
        _dotted = _f.name
    _KEYS[_dotted] = _f.name

_PARSERS = {
    int: int,
    float: float,
    str: str.strip,
}

_POSITIVE = {
    name
    for name in _KEYS.values()
    if name.endswith(("_lr", "_blocks", "_importance"))
    or name in (
        "osml_inner_steps", "osml_search_rounds", "osml_replay_rounds",
        "osml_replay_samples", "osml_finetune_steps", "osml_minibatch_cap",
        "ftml_meta_steps", "ftml_sample", "ftml_finetune_steps",
        "ftml_minibatch_cap", "nt_steps", "ft_steps", "model_layers",
        "model_width", "stream_n_modes", "stream_tasks_per_mode",
        "stream_n_classes", "stream_dims", "stream_signal_dims",
        "stream_support_per_class", "stream_query_per_class",
        "stream_test_per_class", "sweep_target",
    )
}


def _parse_value(field_name: str, raw: str):
    default = getattr(ExperimentConfig(), field_name)
    if isinstance(default, bool):
        return _parse_bool(raw)
    if isinstance(default, tuple):
        return _parse_str_list(raw) if field_name == "methods" else _parse_int_list(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def _validate(cfg: ExperimentConfig) -> None:
    for name in _POSITIVE:
        if getattr(cfg, name) <= 0:
            raise ValueError(f"{_dotted_name(name)} must be positive")
    if cfg.stream_kind not in ("synthetic", "rainbow", "idx_modes"):
        raise ValueError(f"unknown stream.kind {cfg.stream_kind!r}")
    if cfg.stream_kind == "rainbow" and not (cfg.stream_images and cfg.stream_labels):
        raise ValueError("stream.kind=rainbow needs stream.images and stream.labels")
    if cfg.stream_kind == "idx_modes" and not cfg.stream_root:
        raise ValueError("stream.kind=idx_modes needs stream.root")
    if cfg.model_kind not in ("dense", "conv"):
        raise ValueError(f"unknown model.kind {cfg.model_kind!r}")
    if cfg.loss not in ("cross_entropy", "mse"):
        raise ValueError(f"unknown loss {cfg.loss!r}")
    for m in cfg.methods:
        if m not in KNOWN_METHODS:
            raise ValueError(f"unknown method {m!r} (choose from {', '.join(KNOWN_METHODS)})")
    if any(m.endswith("_large") for m in cfg.methods) and "osml" not in cfg.methods:
        raise ValueError("_large baselines size themselves from the osml run; add osml to methods")
    if not cfg.seeds:
        raise ValueError("seeds must be non-empty")
    if not cfg.methods:
        raise ValueError("methods must be non-empty")
    if cfg.stream_kind == "synthetic":
        if cfg.stream_n_modes * cfg.stream_signal_dims > cfg.stream_dims:
            raise ValueError("stream.n_modes * stream.signal_dims must fit in stream.dims")


def _dotted_name(field_name: str) -> str:
    for dotted, name in _KEYS.items():
        if name == field_name:
            return dotted
    return field_name


def parse_config(path) -> ExperimentConfig:
    """Strict key=value parser; unknown keys fail with their line number."""
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            if key not in _KEYS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            name = _KEYS[key]
            try:
                values[name] = _parse_value(name, raw)
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: bad value for {key}: {e}") from None
    cfg = ExperimentConfig(**values)
    _validate(cfg)
    return cfg


def resolved_config_text(cfg: ExperimentConfig) -> str:
    """Every key with its effective value, one per line, sorted."""
    lines = []
    for dotted in sorted(_KEYS):
        v = getattr(cfg, _KEYS[dotted])
        if isinstance(v, tuple):
            v = ",".join(str(p) for p in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{dotted}={v}")
    return "\n".join(lines) + "\n"


# stream / model construction ------------------------------------------------


def build_stream(cfg: ExperimentConfig, seed: int):
    """Episodes plus a tag -> transform-family map for the manifest."""
    if cfg.stream_kind == "synthetic":
        modes = tk.make_modes(
            cfg.stream_n_modes, cfg.stream_dims, seed,
            signal_dims=cfg.stream_signal_dims, bias_scale=cfg.stream_bias_scale,
            distractor_scale=cfg.stream_distractor_scale,
        )
        episodes = tk.synthetic_hetero_stream(
            modes, cfg.stream_tasks_per_mode, n_classes=cfg.stream_n_classes,
            dims=cfg.stream_dims, seed=seed,
            support_per_class=cfg.stream_support_per_class,
            query_per_class=cfg.stream_query_per_class,
            test_per_class=cfg.stream_test_per_class, noise=cfg.stream_noise,
        )
        families = {m.tag: m.family for m in modes}
    elif cfg.stream_kind == "rainbow":
        images = tk.load_idx_images(cfg.stream_images)
        labels = tk.load_idx_labels(cfg.stream_labels)
        episodes = tk.rainbow_stream(
            images, labels, seed,
            support_per_class=cfg.stream_support_per_class,
            query_per_class=cfg.stream_query_per_class,
            test_per_class=cfg.stream_test_per_class,
        )
        families = {e.tag: e.tag for e in episodes}
    else:
        episodes = tk.idx_mode_stream(
            cfg.stream_root, cfg.stream_tasks_per_mode, seed,
            support_per_class=cfg.stream_support_per_class,
            query_per_class=cfg.stream_query_per_class,
            test_per_class=cfg.stream_test_per_class,
        )
        families = {e.tag: e.tag for e in episodes}
    return episodes, families


def model_specs(cfg: ExperimentConfig) -> list:
    spec = gr.BlockSpec(
        cfg.model_kind, cfg.model_width, kernel_size=cfg.model_kernel_size,
        stride=cfg.model_stride, padding=cfg.model_padding,
        batch_norm=cfg.model_batch_norm, activation=cfg.model_activation,
    )
    return [replace(spec) for _ in range(cfg.model_layers)]


def input_shape_of(episodes) -> tuple:
    return tuple(episodes[0].support_x.shape[1:])


def search_config(cfg: ExperimentConfig) -> search.SearchConfig:
    return search.SearchConfig(
        inner_lr=cfg.osml_inner_lr, inner_steps=cfg.osml_inner_steps,
        search_rounds=cfg.osml_search_rounds, lr_blocks=cfg.osml_lr_blocks,
        lr_importance=cfg.osml_lr_importance, spawn_novel=cfg.osml_spawn_novel,
        loss=cfg.loss,
    )


def update_config(cfg: ExperimentConfig) -> mu.UpdateConfig:
    return mu.UpdateConfig(
        replay_rounds=cfg.osml_replay_rounds, replay_samples=cfg.osml_replay_samples,
        replay_lr=cfg.osml_replay_lr, replay_inner_lr=cfg.osml_replay_inner_lr,
        finetune_lr=cfg.osml_finetune_lr, finetune_steps=cfg.osml_finetune_steps,
        minibatch_cap=cfg.osml_minibatch_cap, loss=cfg.loss,
    )


def ftml_config(cfg: ExperimentConfig) -> bl.FtmlConfig:
    return bl.FtmlConfig(
        meta_steps=cfg.ftml_meta_steps, sample=cfg.ftml_sample,
        inner_lr=cfg.ftml_inner_lr, outer_lr=cfg.ftml_outer_lr,
        finetune_lr=cfg.ftml_finetune_lr, finetune_steps=cfg.ftml_finetune_steps,
        minibatch_cap=cfg.ftml_minibatch_cap, loss=cfg.loss,
    )


# cell execution --------------------------------------------------------------


@dataclass
class CellOutcome:
    method: str
    seed: int
    rows: list = field(default_factory=list)
    history: list = field(default_factory=list)  # (tag, block_id tuple) for osml
    block_counts: list | None = None
    error: str = ""


def _metric_row(cfg, method, seed, res) -> tuple:
    wall = res.wall_ms if cfg.report_timing else 0.0
    return (
        method, seed, res.task_index, res.tag,
        f"{res.accuracy:.6f}", f"{res.query_loss:.6f}",
        ";".join(str(c) for c in res.blocks_per_layer), f"{wall:.3f}",
    )


def run_cell(cfg: ExperimentConfig, method: str, seed: int, out_dir: str,
             widen_factors=None) -> CellOutcome:
    """One (method, seed) run; exceptions are captured, not raised."""
    outcome = CellOutcome(method, seed)
    try:
        episodes, _ = build_stream(cfg, seed)
        specs = model_specs(cfg)
        shape = input_shape_of(episodes)
        n_classes = cfg.stream_n_classes if cfg.stream_kind == "synthetic" else episodes[0].n_classes
        base = method.removesuffix("_large")
        if method.endswith("_large"):
            if widen_factors is None:
                raise RuntimeError("large baseline needs the osml run's block counts")
            specs = bl.widen_specs(specs, widen_factors)
        if base == "osml":
            journal_path = os.path.join(out_dir, f"journal_osml_seed{seed}.txt")
            with open(journal_path, "w", encoding="utf-8") as journal:
                results, graph = mu.run_osml_stream(
                    specs, shape, n_classes, episodes, search_config(cfg),
                    update_config(cfg), seed, journal=journal,
                )
            gr.save_graph(graph, os.path.join(out_dir, f"graph_osml_seed{seed}.ckpt"))
            outcome.history = [(r.tag, tuple(r.pathway.block_ids)) for r in results]
            outcome.block_counts = graph.block_counts()
        elif base == "ftml":
            results = bl.run_ftml(specs, shape, n_classes, episodes, ftml_config(cfg), seed)
        elif base == "nt":
            results = bl.run_nt(specs, shape, n_classes, episodes,
                                bl.TrainConfig(cfg.nt_lr, cfg.nt_steps, cfg.loss), seed)
        elif base == "ft":
            results = bl.run_ft(specs, shape, n_classes, episodes,
                                bl.TrainConfig(cfg.ft_lr, cfg.ft_steps, cfg.loss), seed)
        else:
            raise ValueError(f"unknown method {method!r}")
        outcome.rows = [_metric_row(cfg, method, seed, r) for r in results]
    except Exception:
        outcome.error = traceback.format_exc()
    return outcome


def _write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _write_manifest(cfg, seed, out_dir) -> None:
    episodes, families = build_stream(cfg, seed)
    rows = [
        (t, ep.tag, families.get(ep.tag, ep.tag), seed)
        for t, ep in enumerate(episodes)
    ]
    _write_csv(
        os.path.join(out_dir, f"manifest_seed{seed}.csv"),
        ("task_index", "tag", "transform_or_mode", "seed"), rows,
    )


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs: int = 1) -> tuple:
    """All (method, seed) cells, metrics.csv, and the report files.

    Returns (all_cells_ok, output_dir). A failing cell is recorded in
    failures.txt and leaves every other cell's output intact. An explicit
    out_dir is used verbatim; the config's output.dir goes through
    resolve_output_dir.
    """
    out = resolve_output_dir(cfg.output_dir) if out_dir is None else str(out_dir)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config_resolved.txt"), "w", encoding="utf-8") as f:
        f.write(resolved_config_text(cfg))
    stage_failures = {}
    for seed in cfg.seeds:
        try:
            _write_manifest(cfg, seed, out)
        except Exception:
            stage_failures[("manifest", seed)] = traceback.format_exc()

    first = [(m, s) for m in cfg.methods if not m.endswith("_large") for s in cfg.seeds]
    second = [(m, s) for m in cfg.methods if m.endswith("_large") for s in cfg.seeds]
    outcomes = {}

    def submit_all(cells, factors_by_seed, pool=None):
        if pool is None:
            for m, s in cells:
                outcomes[(m, s)] = run_cell(cfg, m, s, out, factors_by_seed.get(s))
        else:
            futs = {
                (m, s): pool.submit(run_cell, cfg, m, s, out, factors_by_seed.get(s))
                for m, s in cells
            }
            for key, fut in futs.items():
                outcomes[key] = fut.result()

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            submit_all(first, {}, pool)
            factors = {
                s: outcomes[("osml", s)].block_counts
                for s in cfg.seeds
                if ("osml", s) in outcomes and outcomes[("osml", s)].block_counts
            }
            submit_all(second, factors, pool)
    else:
        submit_all(first, {})
        factors = {
            s: outcomes[("osml", s)].block_counts
            for s in cfg.seeds
            if ("osml", s) in outcomes and outcomes[("osml", s)].block_counts
        }
        submit_all(second, factors)

    rows = [row for oc in outcomes.values() for row in oc.rows]
    rows.sort(key=lambda r: (r[0], int(r[1]), int(r[2])))
    _write_csv(os.path.join(out, "metrics.csv"), METRICS_FIELDS, rows)

    failures = dict(stage_failures)
    failures.update({k: oc.error for k, oc in outcomes.items() if oc.error})
    if failures:
        with open(os.path.join(out, "failures.txt"), "w", encoding="utf-8") as f:
            for (m, s), err in sorted(failures.items()):
                f.write(f"=== {m} seed {s} ===\n{err}\n")

    write_reports(out, rows, cfg)
    histories = {
        s: outcomes[("osml", s)].history
        for s in cfg.seeds
        if ("osml", s) in outcomes and outcomes[("osml", s)].history
    }
    for seed, history in sorted(histories.items()):
        write_selection_report(out, seed, history, svg=cfg.report_svg)
    return (not failures, out)


def resolve_output_dir(path) -> str:
    """Relative outputs live under $OSML_OUTPUT_ROOT when it is set."""
    root = os.environ.get("OSML_OUTPUT_ROOT", "")
    if root and not os.path.isabs(str(path)):
        return os.path.join(root, str(path))
    return str(path)


# metrics ---------------------------------------------------------------------


def read_metrics(path) -> list:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if tuple(header) != METRICS_FIELDS:
            raise ValueError(f"unexpected metrics header {header}")
        return [tuple(row) for row in reader]


def mean_ci(values) -> tuple:
    """Mean and 1.96 * standard error; CI is 0 for a single value."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty cell")
    mean = float(arr.mean())
    if arr.size < 2:
        return mean, 0.0
    se = float(arr.std(ddof=1)) / float(np.sqrt(arr.size))
    return mean, 1.96 * se


def _rank_descending(values) -> list:
    """Competition-free ranks, best = 1; ties share the mean rank."""
    order = sorted(range(len(values)), key=lambda i: -values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def average_ranking(acc_by_method: dict) -> dict:
    """acc_by_method: method -> list of accuracies, aligned across methods.
    Ranks every task across methods (descending accuracy, ties take the
    mean rank) and averages; lower is better."""
    methods = sorted(acc_by_method)
    if not methods:
        return {}
    n_tasks = len(acc_by_method[methods[0]])
    for m in methods:
        if len(acc_by_method[m]) != n_tasks:
            raise ValueError("every method needs an accuracy for every task")
    totals = {m: 0.0 for m in methods}
    for t in range(n_tasks):
        ranks = _rank_descending([acc_by_method[m][t] for m in methods])
        for m, r in zip(methods, ranks):
            totals[m] += r
    return {m: totals[m] / n_tasks for m in methods}


def summarize(rows) -> list:
    """Per (method, tag) and per-method overall: mean accuracy, 95% CI, AR.

    Overall accuracy is the unweighted mean over tasks. AR ranks methods
    within every (seed, task_index) cell; a method missing any cell gets
    an empty AR field rather than a rank on partial data.
    """
    by_method = {}
    cells = {}
    for method, seed, task, tag, acc, *_ in rows:
        acc = float(acc)
        key = (int(seed), int(task))
        by_method.setdefault(method, []).append((tag, key, acc))
        cells.setdefault(key, {})[method] = (tag, acc)

    methods = sorted(by_method)
    complete = [
        m for m in methods
        if all(m in cell for cell in cells.values())
    ]
    ar_by_tag = {}
    ar_overall = {m: [] for m in complete}
    if complete and cells:
        for cell_vals in cells.values():
            tags = {cell_vals[m][0] for m in complete}
            ranks = _rank_descending([cell_vals[m][1] for m in complete])
            tag = tags.pop() if len(tags) == 1 else None
            for m, r in zip(complete, ranks):
                ar_overall[m].append(r)
                if tag is not None:
                    ar_by_tag.setdefault((m, tag), []).append(r)

    out = []
    for m in methods:
        tags = sorted({tag for tag, _, _ in by_method[m]})
        for tag in tags:
            accs = [a for t, _, a in by_method[m] if t == tag]
            mean, ci = mean_ci(accs)
            ar = ar_by_tag.get((m, tag))
            out.append((m, tag, f"{mean:.6f}", f"{ci:.6f}",
                        f"{np.mean(ar):.6f}" if ar else ""))
        accs = [a for _, _, a in by_method[m]]
        mean, ci = mean_ci(accs)
        ar = ar_overall.get(m)
        out.append((m, "overall", f"{mean:.6f}", f"{ci:.6f}",
                    f"{np.mean(ar):.6f}" if ar else ""))
    return out


def summarize_by_seed(rows) -> list:
    """Like summarize, but each seed's mean is one observation: CIs are
    over per-seed means and AR averages per-seed ARs."""
    per_seed = {}
    for method, seed, task, tag, acc, *_ in rows:
        per_seed.setdefault(int(seed), []).append((method, seed, task, tag, acc))
    agg = {}
    for seed, seed_rows in sorted(per_seed.items()):
        for m, tag, mean, ci, ar in summarize(seed_rows):
            agg.setdefault((m, tag), []).append((float(mean), float(ar) if ar else None))
    out = []
    for (m, tag), vals in sorted(agg.items()):
        mean, ci = mean_ci([v[0] for v in vals])
        ars = [v[1] for v in vals if v[1] is not None]
        out.append((m, tag, f"{mean:.6f}", f"{ci:.6f}",
                    f"{np.mean(ars):.6f}" if ars else ""))
    return out


def write_reports(out_dir, rows, cfg=None) -> None:
    _write_csv(os.path.join(out_dir, "summary.csv"), SUMMARY_FIELDS, summarize(rows))
    _write_csv(
        os.path.join(out_dir, "summary_by_seed.csv"), SUMMARY_FIELDS,
        summarize_by_seed(rows),
    )


# selection report ------------------------------------------------------------

_SVG_COLORS = ("#4878d0", "#ee854a", "#6acc64", "#d65f5f", "#956cb4",
               "#8c613c", "#dc7ec0", "#797979")


def write_selection_report(out_dir, seed, history, svg: bool = True) -> None:
    """Per-layer selection ratios for one run plus optional SVG bars.

    history: (tag, block_id tuple) per task, in stream order.
    """
    layer_of = {}
    for _, block_ids in history:
        for layer, bid in enumerate(block_ids):
            layer_of[bid] = layer
    ratios = gr.selection_ratios([(tag, gr.Pathway(bids)) for tag, bids in history])
    rows = sorted(
        (layer_of[bid], bid, tag, f"{ratio:.6f}")
        for bid, per_tag in ratios.items()
        for tag, ratio in per_tag.items()
    )
    _write_csv(
        os.path.join(out_dir, f"selection_osml_seed{seed}.csv"),
        ("layer", "block_id", "tag", "ratio"), rows,
    )
    if not svg:
        return
    n_layers = max(layer_of.values()) + 1 if layer_of else 0
    tags = sorted({tag for tag, _ in history})
    for layer in range(n_layers):
        blocks = sorted(bid for bid, l in layer_of.items() if l == layer)
        path = os.path.join(out_dir, f"selection_osml_seed{seed}_layer{layer}.svg")
        with open(path, "w", encoding="utf-8") as f:
            f.write(_selection_svg(layer, blocks, tags, ratios))


def _selection_svg(layer, blocks, tags, ratios) -> str:
    bar_w, gap, group_gap, h = 22, 4, 26, 160
    group_w = len(tags) * (bar_w + gap) + group_gap
    width = max(300, 40 + len(blocks) * group_w)
    height = h + 70
    parts = [
        f'<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<text x="10" y="16">layer {layer}: per-tag selection ratio by block</text>',
    ]
    for gi, bid in enumerate(blocks):
        x0 = 40 + gi * group_w
        parts.append(f'<g id="block{bid}">')
        for ti, tag in enumerate(tags):
            ratio = ratios.get(bid, {}).get(tag, 0.0)
            bh = ratio * h
            x = x0 + ti * (bar_w + gap)
            y = 30 + (h - bh)
            color = _SVG_COLORS[ti % len(_SVG_COLORS)]
            parts.append(
                f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w}" height="{bh:.1f}" '
                f'fill="{color}"><title>{tag}: {ratio:.2f}</title></rect>'
            )
        parts.append(
            f'<text x="{x0 + (group_w - group_gap) / 2:.1f}" y="{30 + h + 14}" '
            f'text-anchor="middle">b{bid}</text></g>'
        )
    for ti, tag in enumerate(tags):
        color = _SVG_COLORS[ti % len(_SVG_COLORS)]
        x = 40 + ti * 110
        parts.append(f'<rect x="{x}" y="{height - 18}" width="10" height="10" fill="{color}"/>')
        parts.append(f'<text x="{x + 14}" y="{height - 9}">{tag}</text>')
    parts.append("</svg>\n")
    return "\n".join(parts)


# sample-budget sweep ---------------------------------------------------------


def efficiency_sweep(cfg: ExperimentConfig, sizes=None, target=None,
                     out_dir=None, jobs: int = 1) -> tuple:
    """Rerun the stream at each per-class support budget.

    Emits per-size runs under size_<n>/, a per-size sweep_summary.csv, and
    the per-task smallest budget (in support samples) reaching the target
    accuracy; tasks that never reach it count the largest budget.
    """
    sizes = tuple(sizes) if sizes else cfg.sweep_sizes
    if not sizes or any(s < 1 for s in sizes):
        raise ValueError("sweep sizes must be positive")
    target = cfg.sweep_target if target is None else float(target)
    out = resolve_output_dir(cfg.output_dir) if out_dir is None else str(out_dir)
    os.makedirs(out, exist_ok=True)
    all_ok = True
    rows_by_size = {}
    for size in sizes:
        sub = replace(cfg, stream_support_per_class=size)
        ok, sub_out = run_experiment(sub, out_dir=os.path.join(out, f"size_{size}"), jobs=jobs)
        all_ok = all_ok and ok
        rows_by_size[size] = read_metrics(os.path.join(sub_out, "metrics.csv"))

    per_size = []
    for size in sizes:
        for m, tag, mean, ci, ar in summarize(rows_by_size[size]):
            if tag == "overall":
                per_size.append((size, m, mean, ci))
    _write_csv(os.path.join(out, "sweep_summary.csv"),
               ("support_per_class", "method", "mean_acc", "ci95"), per_size)

    n_classes = cfg.stream_n_classes
    acc = {}
    for size in sizes:
        for method, seed, task, _, a, *_ in rows_by_size[size]:
            acc[(method, int(seed), int(task), size)] = float(a)
    needed = []
    keys = sorted({(m, s, t) for m, s, t, _ in acc})
    for m, s, t in keys:
        budget = sizes[-1] * n_classes
        for size in sizes:
            if acc[(m, s, t, size)] >= target:
                budget = size * n_classes
                break
        needed.append((m, s, t, budget))
    _write_csv(os.path.join(out, "efficiency.csv"),
               ("method", "seed", "task_index", "support_samples_to_target"), needed)
    by_method = {}
    for m, _, _, b in needed:
        by_method.setdefault(m, []).append(b)
    _write_csv(
        os.path.join(out, "efficiency_summary.csv"),
        ("method", "mean_support_samples_to_target"),
        [(m, f"{np.mean(v):.2f}") for m, v in sorted(by_method.items())],
    )
    return all_ok, out
