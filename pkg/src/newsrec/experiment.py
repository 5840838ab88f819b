"""Experiment orchestration: config files, run directories, grid search,
and report emission.

Config files are flat ``key = value`` text with an explicit schema
version; list-valued grid keys are comma-separated. Every grid point gets
a run id hashed from its full config, and a completed run (metrics.json
present) is never retrained unless forced.
"""

import hashlib
import itertools
import json
from pathlib import Path

from .evaluation import (count_params, evaluate_scores, group_report,
                         write_prediction_dump)
from .training import (RunConfig, load_dataset, predict_impressions,
                       scored_for_eval, train_run)

SCHEMA_VERSION = 1


class InvalidSpec(ValueError):
    pass


class DataMissing(FileNotFoundError):
    pass


class EmptyCell(ValueError):
    pass


# ---------------------------------------------------------------------------
# flat key/value config files

def parse_flat_config(text):
    out = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidSpec(f"line {line_no}: expected 'key = value'")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def format_flat_config(mapping):
    lines = [f"schema_version = {SCHEMA_VERSION}"]
    for key in sorted(mapping):
        if key == "schema_version":
            continue
        lines.append(f"{key} = {mapping[key]}")
    return "\n".join(lines) + "\n"


def _coerce(value, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes")
    return type(like)(value)


GRID_KEYS = {
    "architectures": str,
    "lm_modes": str,
    "negatives": int,
    "dropouts": float,
    "learning_rates": float,
    "seeds": int,
}

_GRID_FIELD = {
    "architectures": "architecture",
    "lm_modes": "lm_mode",
    "negatives": "negatives",
    "dropouts": "dropout",
    "learning_rates": "learning_rate",
    "seeds": "seed",
}


class ExperimentSpec:
    """Grid of RunConfigs over one dataset."""

    def __init__(self, data_dir, output_dir, grid, base_overrides):
        if not grid or any(not v for v in grid.values()):
            raise InvalidSpec("empty grid")
        self.data_dir = data_dir
        self.output_dir = output_dir
        self.grid = grid
        self.base_overrides = base_overrides

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        if not path.exists():
            raise InvalidSpec(f"spec file {path} does not exist")
        flat = parse_flat_config(path.read_text())
        version = flat.pop("schema_version", None)
        if version != str(SCHEMA_VERSION):
            raise InvalidSpec(f"schema_version must be {SCHEMA_VERSION}, got {version}")
        try:
            data_dir = flat.pop("data_dir")
            output_dir = flat.pop("output_dir")
        except KeyError as e:
            raise InvalidSpec(f"missing required key {e}") from None
        grid = {}
        for key, typ in GRID_KEYS.items():
            if key in flat:
                grid[key] = [typ(v.strip()) for v in flat.pop(key).split(",") if v.strip()]
        if "architectures" not in grid or "lm_modes" not in grid:
            raise InvalidSpec("spec needs architectures and lm_modes")
        grid.setdefault("negatives", [4])
        grid.setdefault("dropouts", [0.2])
        grid.setdefault("learning_rates", [1e-4])
        grid.setdefault("seeds", [0])
        defaults = RunConfig().to_flat_dict()
        overrides = {}
        for key, value in flat.items():
            if key not in defaults:
                raise InvalidSpec(f"unknown config key {key!r}")
            overrides[key] = _coerce(value, defaults[key])
        return cls(data_dir, output_dir, grid, overrides)

    def configs(self):
        keys = list(GRID_KEYS)
        out = []
        for combo in itertools.product(*(self.grid[k] for k in keys)):
            flat = RunConfig().to_flat_dict()
            flat.update(self.base_overrides)
            for key, value in zip(keys, combo):
                flat[_GRID_FIELD[key]] = value
            out.append(RunConfig.from_flat_dict(flat))
        return out


def run_id(config) -> str:
    payload = json.dumps(config.to_flat_dict(), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------------------
# run execution

def execute_run(config, bundle, run_dir, force=False, log=print):
    """Train, predict on the test split, evaluate, and leave the artifacts
    in run_dir. Completed runs are skipped unless forced."""
    run_dir = Path(run_dir)
    metrics_path = run_dir / "metrics.json"
    if metrics_path.exists() and not force:
        return json.loads(metrics_path.read_text())
    run_dir.mkdir(parents=True, exist_ok=True)
    flat = {k: str(v) for k, v in config.to_flat_dict().items()}
    flat["run_id"] = run_id(config)
    (run_dir / "config.txt").write_text(format_flat_config(flat))

    log_lines = []

    def capture(msg):
        log_lines.append(msg)
        if log:
            log(f"[{flat['run_id']}] {msg}")

    result = train_run(config, bundle, out_dir=run_dir, log=capture)
    (run_dir / "train_log.txt").write_text("\n".join(log_lines) + "\n")

    preds = predict_impressions(result.model, bundle.catalog,
                                bundle.test_impressions, bundle.user_index,
                                config.max_history)
    write_prediction_dump(run_dir / "predictions.tsv",
                          [(imp.impression_id, preds[imp.impression_id])
                           for imp in bundle.test_impressions])
    report = evaluate_scores(scored_for_eval(preds, bundle.test_impressions),
                             keep_per_impression=False)
    account = count_params(result.model.graph)
    metrics = {
        "run_id": flat["run_id"],
        "config": {k: str(v) for k, v in config.to_flat_dict().items()},
        "architecture": config.architecture,
        "lm_mode": config.lm_mode,
        "seed": config.seed,
        "best_epoch": result.best_epoch,
        "val_auc": result.best_val_auc,
        "test": {"auc": report.auc, "mrr": report.mrr,
                 "ndcg5": report.ndcg5, "ndcg10": report.ndcg10,
                 "impressions": report.impression_count,
                 "skipped_single_class": report.skipped_single_class},
        "params": {"total": account.total, "trainable": account.trainable,
                   "by_component": account.by_component},
    }
    metrics_path.write_text(json.dumps(metrics, indent=2))
    (run_dir / "metrics.txt").write_text(report.render() + "\n")
    return metrics


def run_experiment(spec, force=False, log=print):
    """Execute every grid point; idempotent by run id."""
    data_dir = Path(spec.data_dir)
    if not data_dir.exists():
        raise DataMissing(str(data_dir))
    configs = spec.configs()
    ids = [run_id(c) for c in configs]
    if len(set(ids)) != len(ids):
        raise InvalidSpec("grid produced colliding run ids (duplicate configs?)")
    bundle_cache = {}
    results = []
    for config, rid in zip(configs, ids):
        key = (config.max_title, config.max_abstract, config.min_word_count,
               config.validation_fraction)
        if key not in bundle_cache:
            bundle_cache[key] = load_dataset(data_dir, config)
        run_dir = Path(spec.output_dir) / rid
        results.append(execute_run(config, bundle_cache[key], run_dir,
                                   force=force, log=log))
    return results


# ---------------------------------------------------------------------------
# aggregation and reporting

def grid_search(results):
    """Best result per (architecture, lm mode) by validation AUC; ties fall
    to the lexicographically smallest config."""
    cells = {}
    for metrics in results:
        key = (metrics["architecture"], metrics["lm_mode"])
        cells.setdefault(key, []).append(metrics)
    best = {}
    for key, runs in cells.items():
        if not runs:
            raise EmptyCell(str(key))
        canon = lambda m: json.dumps(m.get("config", m["run_id"]), sort_keys=True)
        best[key] = min(runs, key=lambda m: (-m["val_auc"], canon(m)))
    return best


def aggregate_over_seeds(results):
    """Collapse runs that differ only in seed: metric means plus half the
    min-max spread, keyed by (architecture, lm_mode)."""
    cells = {}
    for m in results:
        cells.setdefault((m["architecture"], m["lm_mode"]), []).append(m)
    out = []
    for (arch, lm), runs in sorted(cells.items()):
        agg = {"architecture": arch, "lm_mode": lm, "runs": len(runs),
               "test": {}, "spread": {}}
        for col in ("auc", "mrr", "ndcg5", "ndcg10"):
            vals = [r["test"][col] for r in runs]
            agg["test"][col] = sum(vals) / len(vals)
            agg["spread"][col] = (max(vals) - min(vals)) / 2.0
        out.append(agg)
    return out


def render_comparison_table(results):
    """Architecture x LM matrix of test metrics (percentages), averaged over
    seeds with a +/- spread when a cell has several runs; the best value per
    metric within an architecture block is starred."""
    lines = ["arch   lm            runs  AUC            MRR      N@5      N@10"]
    by_arch = {}
    for agg in aggregate_over_seeds(results):
        by_arch.setdefault(agg["architecture"], []).append(agg)
    for arch in sorted(by_arch):
        rows = by_arch[arch]
        best = {col: max(r["test"][col] for r in rows)
                for col in ("auc", "mrr", "ndcg5", "ndcg10")}
        for agg in rows:
            t, s = agg["test"], agg["spread"]
            mark = lambda col: "*" if t[col] == best[col] else " "
            auc_cell = f"{t['auc']:6.2f}{mark('auc')}"
            auc_cell += f"±{s['auc']:4.2f}" if agg["runs"] > 1 else "      "
            rest = "  ".join(f"{t[col]:6.2f}{mark(col)}"
                             for col in ("mrr", "ndcg5", "ndcg10"))
            lines.append(f"{arch:<6} {agg['lm_mode']:<12} {agg['runs']:>4}  "
                         f"{auc_cell}  {rest}")
    return "\n".join(lines)


def _lm_family(lm_mode):
    return lm_mode.split(":")[0].replace("-frozen", "")


def _is_tuned(lm_mode):
    if lm_mode == "slm":
        return True
    if lm_mode.startswith("plm:"):
        return int(lm_mode.split(":")[1]) > 0
    return False


def render_finetune_change_table(results):
    """AUC gain of fine-tuned over non-fine-tuned variants of the same LM
    family, as a percentage of the frozen AUC (seed-averaged)."""
    lines = ["arch   family  frozen_auc  tuned_auc  change"]
    groups = {}
    for m in aggregate_over_seeds(results):
        key = (m["architecture"], _lm_family(m["lm_mode"]))
        tuned = _is_tuned(m["lm_mode"])
        auc = m["test"]["auc"]
        prev = groups.setdefault(key, {}).get(tuned)
        # several fine-tune depths may share a family; keep the best one
        groups[key][tuned] = auc if prev is None else max(prev, auc)
    for (arch, family), pair in sorted(groups.items()):
        if True not in pair or False not in pair:
            continue
        frozen, tuned = pair[False], pair[True]
        change = 100.0 * (tuned - frozen) / frozen
        lines.append(f"{arch:<6} {family:<7} {frozen:>10.2f} {tuned:>10.2f} "
                     f"{change:+.2f}%")
    return "\n".join(lines)


def parameter_chart_rows(results):
    rows = [("architecture", "lm_mode", "total_params", "trainable_params")]
    for m in sorted(results, key=lambda m: (m["architecture"], m["lm_mode"])):
        rows.append((m["architecture"], m["lm_mode"],
                     str(m["params"]["total"]), str(m["params"]["trainable"])))
    return rows


def cold_start_rows(partition, reports_by_encoder, baseline):
    """Fig-7-style rows: one per (encoder, group) with AUC and relative
    change against the baseline encoder."""
    rep = group_report(partition, reports_by_encoder, baseline)
    rows = [("encoder", "group", "users", "mean_history", "auc", "relative_change")]
    for name in rep.auc:
        for gi in range(len(rep.user_counts)):
            rows.append((name, str(gi + 1), str(rep.user_counts[gi]),
                         f"{rep.mean_history_lengths[gi]:.2f}",
                         f"{rep.auc[name][gi]:.4f}",
                         f"{rep.relative_change[name][gi]:+.4f}"))
    return rows, rep


def write_tsv(path, rows):
    Path(path).write_text("\n".join("\t".join(r) for r in rows) + "\n",
                          encoding="utf-8")


def collect_run_metrics(runs_dir):
    runs_dir = Path(runs_dir)
    out = []
    for metrics_path in sorted(runs_dir.glob("*/metrics.json")):
        out.append(json.loads(metrics_path.read_text()))
    return out


def emit_report(runs_dir, out_dir, log=print, data_dir="", baseline=""):
    """Regenerate all comparison artifacts from completed run directories;
    pure function of the stored metrics. With a data dir and a baseline lm
    mode, also rebuilds the engagement-group chart from the stored
    prediction dumps."""
    results = collect_run_metrics(runs_dir)
    if not results:
        raise DataMissing(f"no completed runs under {runs_dir}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    comparison = render_comparison_table(results)
    change = render_finetune_change_table(results)
    (out_dir / "comparison.txt").write_text(comparison + "\n")
    (out_dir / "finetune_change.txt").write_text(change + "\n")
    write_tsv(out_dir / "parameters.tsv", parameter_chart_rows(results))
    if log:
        log(comparison)
        log("")
        log(change)
    if data_dir and baseline:
        rows, rep = engagement_chart(runs_dir, results, data_dir, baseline)
        write_tsv(out_dir / "groups.tsv", rows)
        if log:
            log("")
            log(rep.render())
    return results


def engagement_chart(runs_dir, results, data_dir, baseline):
    """Quintile AUC + relative-change rows per encoder from the best run of
    each (architecture, lm mode) cell."""
    from .corpus import parse_behaviors
    from .evaluation import bucket_users, evaluate_run

    with open(Path(data_dir) / "dev" / "behaviors.tsv", encoding="utf-8") as f:
        impressions = parse_behaviors(f)
    partition = bucket_users(impressions)
    users = {i.impression_id: i.user_id for i in impressions}
    reports = {}
    for (arch, lm), m in grid_search(results).items():
        dump = Path(runs_dir) / m["run_id"] / "predictions.tsv"
        if not dump.exists():
            continue
        reports[f"{arch}/{lm}"] = (evaluate_run(str(dump), impressions), users)
    if baseline not in reports:
        raise InvalidSpec(f"baseline {baseline!r} has no completed run; "
                          f"choose from {sorted(reports)}")
    return cold_start_rows(partition, reports, baseline)
