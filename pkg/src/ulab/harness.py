"""Experiment orchestration: sweeps, healing protocol, single-stage runs.

Every stage derives its own seed from the master seed and a stage tag, so a
report's accuracy numbers are a pure function of (config, seed) while wall
times remain informational. Every model a report evaluates is persisted
under <out>/checkpoints and its digest recorded, so results can be traced
back to exact parameters. Failed cells are recorded and skipped, not fatal:
aggressive unlearning settings are expected to collapse sometimes.
"""

from __future__ import annotations

import math
import shutil
import time
import warnings
from dataclasses import replace
from pathlib import Path

from ._util import mix_seed
from .adversary import generate_requests, save_requests
from .approx import sequential_unlearn
from .config import DatasetSpec, ExperimentConfig, ModelSpec
from .dataset import (
    Dataset,
    SplitSpec,
    generate_blobs,
    load_csv,
    load_idx,
    remove_by_ids,
    samples_by_ids,
    split_primary_backup,
)
from .exact import (
    SisaEnsemble,
    file_digest,
    save_ensemble,
    sisa_accuracy,
    sisa_train,
    sisa_unlearn,
    train_gold,
)
from .healing import (
    FEATURE,
    HealConfig,
    MetricSpec,
    RAW,
    REMAIN_ONLY,
    REMAIN_PLUS_RANDOM,
    REMAIN_PLUS_TWINS,
    build_twin_index,
    draw_random_replacements,
    heal,
    prepare_metric,
    save_twin_csv,
)
from .model import Architecture, ModelState, TrainConfig, accuracy, save_model
from .report import MetricsReport, RunRecord, representative_index, write_report

APPROX_METHODS = ("fisher", "influence")

METRIC_VARIANTS = (
    ("raw-l2", RAW, "l2"),
    ("raw-mahalanobis", RAW, "mahalanobis"),
    ("feature-cosine", FEATURE, "cosine"),
    ("feature-mahalanobis", FEATURE, "mahalanobis"),
)


def build_dataset(spec: DatasetSpec, seed: int) -> Dataset:
    if spec.source == "blobs":
        return generate_blobs(
            spec.num_classes,
            spec.per_class,
            spec.feature_dim,
            spread=spec.spread,
            seed=mix_seed(seed, "data"),
            class_distance=spec.class_distance,
        )
    if spec.source == "csv":
        data = load_csv(spec.path, spec.label_column)
    else:
        data = load_idx(spec.images, spec.labels)
    if spec.limit is not None and spec.limit < len(data):
        data = data.select(range(spec.limit))
    return data


def build_arch(model: ModelSpec, data: Dataset) -> Architecture:
    return Architecture(
        kind=model.kind,
        feature_dim=data.feature_dim,
        num_classes=data.num_classes,
        hidden_dim=model.hidden_dim if model.kind == "mlp" else 0,
        activation=model.activation,
    )


def _persist_model(state: ModelState, out: Path, name: str) -> dict:
    path = out / "checkpoints" / f"{name}.ulck"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_model(state, path)
    return {
        "checkpoint": f"checkpoints/{name}.ulck",
        "checkpoint_digest": file_digest(path),
    }


def _persist_ensemble(e: SisaEnsemble, out: Path, name: str) -> dict:
    directory = out / "checkpoints" / name
    if directory.exists():
        shutil.rmtree(directory)
    save_ensemble(e, directory)
    return {
        "checkpoint": f"checkpoints/{name}",
        "checkpoint_digest": file_digest(directory / "manifest.json"),
    }


def _copy_config(cfg: ExperimentConfig, out: Path) -> None:
    if cfg.source_path and Path(cfg.source_path).exists():
        target = out / "config.toml"
        if Path(cfg.source_path).resolve() != target.resolve():
            shutil.copyfile(cfg.source_path, target)


def _prepare(cfg: ExperimentConfig):
    """Shared setup: output dir, data, arch, train/test split, base report."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _copy_config(cfg, out)
    data = build_dataset(cfg.dataset, cfg.seed)
    arch = build_arch(cfg.model, data)
    pool, test = split_primary_backup(
        data,
        SplitSpec(1.0 - cfg.validation_fraction, seed=mix_seed(cfg.seed, "val-split")),
    )
    report = MetricsReport(config_digest=cfg.digest, master_seed=cfg.seed)
    return out, pool, test, arch, report


def _train_baseline(cfg, pool, test, arch, out, report):
    seed = mix_seed(cfg.seed, "baseline")
    t0 = time.monotonic()
    m = train_gold(pool, arch, replace(cfg.train_cfg, seed=seed))
    dt = time.monotonic() - t0
    extra = _persist_model(m, out, "baseline_naive")
    report.add(
        RunRecord(
            stage="baseline",
            method="naive",
            scenario="full-data",
            accuracy=accuracy(m, test),
            wall_time_s=dt,
            seed=seed,
            extra=extra,
        )
    )
    return m


def _requests_for(cfg, data, m, budget, tag):
    adv = replace(
        cfg.adversary, budget=budget, seed=mix_seed(cfg.seed, "requests", tag)
    )
    return generate_requests(data, adv, m=m, solver=cfg.influence), adv


# ---------------------------------------------------------------------------
# removal-fraction sweep


def run_sweep(cfg: ExperimentConfig) -> MetricsReport:
    """Train both baselines, then unlearn each fraction with all four methods.

    Produces len(fractions) x 4 method cells plus the two baseline records.
    A failing cell is logged with its error and the sweep continues.
    """
    out, pool, test, arch, report = _prepare(cfg)
    m_base = _train_baseline(cfg, pool, test, arch, out, report)

    sisa_seed = mix_seed(cfg.seed, "sisa-baseline")
    sisa_cfg = replace(cfg.sisa, train_cfg=cfg.train_cfg, seed=sisa_seed)
    t0 = time.monotonic()
    e_base = sisa_train(pool, arch, sisa_cfg)
    dt = time.monotonic() - t0
    report.add(
        RunRecord(
            stage="baseline",
            method="sisa",
            scenario="full-data",
            accuracy=sisa_accuracy(e_base, test),
            wall_time_s=dt,
            seed=sisa_seed,
            extra=_persist_ensemble(e_base, out, "baseline_sisa"),
        )
    )

    for f in cfg.fractions:
        tag = f"{f:g}"
        ids, adv = _requests_for(cfg, pool, m_base, float(f), tag)
        save_requests(ids, adv, out / f"requests_f{tag}.json")
        d_r = remove_by_ids(pool, ids)
        assignment = e_base.assignment()
        touched = sorted({assignment[sid][0] for sid in ids})

        def gold_cell():
            seed = mix_seed(cfg.seed, "gold", tag)
            m = train_gold(d_r, arch, replace(cfg.train_cfg, seed=seed))
            return m, seed, _persist_model(m, out, f"gold_f{tag}")

        def sisa_cell():
            e = sisa_unlearn(e_base, ids)
            extra = _persist_ensemble(e, out, f"sisa_f{tag}")
            extra["retrained_shards"] = touched
            return e, sisa_seed, extra

        def fisher_cell():
            seed = mix_seed(cfg.seed, "fisher", tag)
            m = sequential_unlearn(
                m_base, pool, ids, "fisher",
                replace(cfg.fisher, seed=seed), cfg.minibatch_size,
                log_path=out / f"fisher_f{tag}.jsonl",
            )
            return m, seed, _persist_model(m, out, f"fisher_f{tag}")

        def influence_cell():
            seed = mix_seed(cfg.seed, "influence", tag)
            m = sequential_unlearn(
                m_base, pool, ids, "influence",
                replace(cfg.influence, seed=seed), cfg.minibatch_size,
                log_path=out / f"influence_f{tag}.jsonl",
            )
            return m, seed, _persist_model(m, out, f"influence_f{tag}")

        cells = [
            ("naive", gold_cell),
            ("sisa", sisa_cell),
            ("fisher", fisher_cell),
            ("influence", influence_cell),
        ]
        for method, cell in cells:
            t0 = time.monotonic()
            try:
                result, seed, extra = cell()
                acc = (
                    sisa_accuracy(result, test)
                    if isinstance(result, SisaEnsemble)
                    else accuracy(result, test)
                )
                report.add(
                    RunRecord(
                        stage="unlearn",
                        method=method,
                        fraction=float(f),
                        accuracy=acc,
                        wall_time_s=time.monotonic() - t0,
                        seed=seed,
                        extra=extra,
                    )
                )
            except Exception as e:
                report.add(
                    RunRecord(
                        stage="unlearn",
                        method=method,
                        fraction=float(f),
                        accuracy=None,
                        wall_time_s=time.monotonic() - t0,
                        seed=cfg.seed,
                        extra={"failed": True, "error": f"{type(e).__name__}: {e}"},
                    )
                )
    write_report(report, out)
    return report


# ---------------------------------------------------------------------------
# healing protocol


def _metric_spec(cfg: ExperimentConfig, space: str, kind: str) -> MetricSpec:
    return MetricSpec(space=space, kind=kind, shrinkage=cfg.healing.shrinkage)


def _heal_train_cfg(cfg: ExperimentConfig, epochs: int, seed: int) -> TrainConfig:
    return TrainConfig(
        epochs=epochs,
        learning_rate=cfg.healing.learning_rate,
        batch_size=cfg.healing.batch_size,
        optimizer="adam",
        ridge=cfg.train_cfg.ridge,
        seed=seed,
    )


def run_healing_protocol(
    cfg: ExperimentConfig, methods: tuple[str, ...] = APPROX_METHODS
) -> MetricsReport:
    """Full adversarial-unlearning-then-healing pipeline.

    70/30 primary/backup split, baseline and gold models, R repetitions of
    each approximate unlearning, representative-run selection, twin search
    under the four metric variants, then the healing grid (variants x epoch
    settings) measured against gold accuracy.
    """
    out, work, test, arch, report = _prepare(cfg)
    primary, backup = split_primary_backup(
        work, SplitSpec(cfg.primary_fraction, seed=mix_seed(cfg.seed, "backup-split"))
    )
    m_base = _train_baseline(cfg, primary, test, arch, out, report)

    ids, adv = _requests_for(cfg, primary, m_base, cfg.healing.targets, "heal-targets")
    save_requests(ids, adv, out / "requests_heal.json")
    targets = samples_by_ids(primary, ids)
    protected = Dataset(targets, primary.num_classes, primary.feature_dim)
    d_r = remove_by_ids(primary, ids)

    gold_seed = mix_seed(cfg.seed, "gold")
    t0 = time.monotonic()
    m_gold = train_gold(d_r, arch, replace(cfg.train_cfg, seed=gold_seed))
    gold_acc = accuracy(m_gold, test)
    report.add(
        RunRecord(
            stage="gold",
            method="naive",
            scenario="retrain",
            accuracy=gold_acc,
            wall_time_s=time.monotonic() - t0,
            seed=gold_seed,
            extra=_persist_model(m_gold, out, "gold"),
        )
    )

    # approximate unlearning repetitions and representative selection
    representatives: dict[str, ModelState] = {}
    for method in methods:
        base_cfg = cfg.fisher if method == "fisher" else cfg.influence
        states, accs = [], []
        for rep in range(cfg.repetitions):
            seed = mix_seed(cfg.seed, "unlearn", method, rep)
            t0 = time.monotonic()
            try:
                state = sequential_unlearn(
                    m_base, primary, ids, method,
                    replace(base_cfg, seed=seed), cfg.minibatch_size,
                )
                acc = accuracy(state, test)
            except Exception as e:
                report.add(
                    RunRecord(
                        stage="unlearn", method=method, scenario="repetition",
                        run_index=rep, accuracy=None,
                        wall_time_s=time.monotonic() - t0, seed=seed,
                        extra={"failed": True, "error": f"{type(e).__name__}: {e}"},
                    )
                )
                continue
            states.append(state)
            accs.append(acc)
            report.add(
                RunRecord(
                    stage="unlearn", method=method, scenario="repetition",
                    run_index=rep, accuracy=acc,
                    wall_time_s=time.monotonic() - t0, seed=seed,
                    extra=_persist_model(state, out, f"unlearn_{method}_rep{rep}"),
                )
            )
        if not states:
            warnings.warn(f"every {method} repetition failed; skipping its grid")
            continue
        rep_idx = representative_index(accs)
        representatives[method] = states[rep_idx]
        if accs[rep_idx] < 1.5 / arch.num_classes:
            warnings.warn(
                f"representative {method} model is collapsed "
                f"(accuracy {accs[rep_idx]:.3f}); healing grid runs anyway"
            )
        report.add(
            RunRecord(
                stage="representative", method=method,
                scenario=f"run={rep_idx}", run_index=rep_idx,
                accuracy=accs[rep_idx], seed=mix_seed(cfg.seed, "unlearn", method, rep_idx),
                extra={"collapsed": bool(accs[rep_idx] < 1.5 / arch.num_classes)},
            )
        )

    # twin search under the four metric variants
    replacements: dict[str, list] = {}
    for label, space, kind in METRIC_VARIANTS:
        spec = prepare_metric(_metric_spec(cfg, space, kind), d_r, m_base)
        twins = build_twin_index(
            protected, backup, spec, delta=cfg.healing.delta,
            q=cfg.healing.q, m=m_base,
        )
        save_twin_csv(twins, out / f"twins_{label}.csv")
        replacements[label] = samples_by_ids(backup, twins.all_surrogate_ids())

    variants: list[tuple[str, str, list]] = [("remain-only", REMAIN_ONLY, [])]
    variants += [
        (f"twins-{label}", REMAIN_PLUS_TWINS, replacements[label])
        for label, _, _ in METRIC_VARIANTS
    ]
    if cfg.healing.include_random_control:
        variants.append(
            (
                "random",
                REMAIN_PLUS_RANDOM,
                draw_random_replacements(
                    backup, cfg.healing.targets, seed=mix_seed(cfg.seed, "random-ctl")
                ),
            )
        )

    unlearned_ids = set(ids)
    for method, start in representatives.items():
        for epochs in cfg.heal_epoch_settings():
            group_cells = []
            for label, mode, repl in variants:
                assert not unlearned_ids & {s.id for s in repl}
                seed = mix_seed(cfg.seed, "heal", method, label, epochs)
                heal_cfg = HealConfig(
                    data_mode=mode, epochs=epochs,
                    train_cfg=_heal_train_cfg(cfg, epochs, seed),
                )
                t0 = time.monotonic()
                try:
                    healed = heal(start, d_r, repl, heal_cfg)
                    acc = accuracy(healed, test)
                except Exception as e:
                    report.add(
                        RunRecord(
                            stage="heal", method=label,
                            scenario=f"start={method},epochs={epochs}",
                            accuracy=None, wall_time_s=time.monotonic() - t0,
                            seed=seed,
                            extra={"failed": True, "error": f"{type(e).__name__}: {e}"},
                        )
                    )
                    continue
                extra = _persist_model(
                    healed, out, f"heal_{method}_{label}_e{epochs}"
                )
                extra["delta_pp_vs_gold"] = round((acc - gold_acc) * 100.0, 3)
                extra["replacements"] = len(repl)
                report.add(
                    RunRecord(
                        stage="heal", method=label,
                        scenario=f"start={method},epochs={epochs}",
                        accuracy=acc, wall_time_s=time.monotonic() - t0,
                        seed=seed, extra=extra,
                    )
                )
                group_cells.append((label, acc))
            if group_cells:
                best_label, best_acc = max(group_cells, key=lambda c: c[1])
                worst_label, worst_acc = min(group_cells, key=lambda c: c[1])
                report.groups.append(
                    {
                        "stage": "heal-group",
                        "start_method": method,
                        "epochs": epochs,
                        "gold_acc": gold_acc,
                        "best_variant": best_label,
                        "best_acc": best_acc,
                        "worst_variant": worst_label,
                        "worst_acc": worst_acc,
                        "delta_pp_best_gold": round((best_acc - gold_acc) * 100.0, 3),
                    }
                )
    write_report(report, out)
    return report


# ---------------------------------------------------------------------------
# single-stage runs backing the narrower CLI subcommands


def run_train(cfg: ExperimentConfig) -> MetricsReport:
    out, pool, test, arch, report = _prepare(cfg)
    _train_baseline(cfg, pool, test, arch, out, report)
    write_report(report, out)
    return report


def run_sisa_train(cfg: ExperimentConfig) -> MetricsReport:
    out, pool, test, arch, report = _prepare(cfg)
    seed = mix_seed(cfg.seed, "sisa-baseline")
    sisa_cfg = replace(cfg.sisa, train_cfg=cfg.train_cfg, seed=seed)
    t0 = time.monotonic()
    e = sisa_train(pool, arch, sisa_cfg)
    report.add(
        RunRecord(
            stage="baseline", method="sisa", scenario="full-data",
            accuracy=sisa_accuracy(e, test),
            wall_time_s=time.monotonic() - t0, seed=seed,
            extra=_persist_ensemble(e, out, "baseline_sisa"),
        )
    )
    write_report(report, out)
    return report


def run_attack(cfg: ExperimentConfig) -> Path:
    """Generate and export an unlearn-request list; returns the JSON path."""
    out, pool, test, arch, report = _prepare(cfg)
    m = None
    if cfg.adversary.knowledge != "blind":
        m = _train_baseline(cfg, pool, test, arch, out, report)
    ids, adv = _requests_for(cfg, pool, m, cfg.adversary.budget, "attack")
    path = out / "requests.json"
    save_requests(ids, adv, path)
    write_report(report, out)
    return path


def run_unlearn(cfg: ExperimentConfig) -> MetricsReport:
    """Train a baseline, generate requests, apply the configured method."""
    out, pool, test, arch, report = _prepare(cfg)
    m_base = _train_baseline(cfg, pool, test, arch, out, report)
    ids, adv = _requests_for(cfg, pool, m_base, cfg.adversary.budget, "unlearn")
    save_requests(ids, adv, out / "requests.json")
    d_r = remove_by_ids(pool, ids)
    method = cfg.unlearn_method
    seed = mix_seed(cfg.seed, "unlearn", method)
    t0 = time.monotonic()
    if method == "naive":
        m = train_gold(d_r, arch, replace(cfg.train_cfg, seed=seed))
        extra = _persist_model(m, out, "unlearned_naive")
        acc = accuracy(m, test)
    elif method == "sisa":
        e = sisa_train(pool, arch, replace(cfg.sisa, train_cfg=cfg.train_cfg, seed=seed))
        e = sisa_unlearn(e, ids)
        extra = _persist_ensemble(e, out, "unlearned_sisa")
        acc = sisa_accuracy(e, test)
    else:
        base_cfg = cfg.fisher if method == "fisher" else cfg.influence
        m = sequential_unlearn(
            m_base, pool, ids, method, replace(base_cfg, seed=seed),
            cfg.minibatch_size, log_path=out / "unlearn_log.jsonl",
        )
        extra = _persist_model(m, out, f"unlearned_{method}")
        acc = accuracy(m, test)
    report.add(
        RunRecord(
            stage="unlearn", method=method, scenario="requests",
            accuracy=acc, wall_time_s=time.monotonic() - t0,
            seed=seed, extra=extra,
        )
    )
    write_report(report, out)
    return report


def run_heal(cfg: ExperimentConfig) -> MetricsReport:
    """Single-pass healing run: one repetition, configured method only."""
    method = cfg.unlearn_method if cfg.unlearn_method in APPROX_METHODS else "fisher"
    return run_healing_protocol(replace(cfg, repetitions=1), methods=(method,))
