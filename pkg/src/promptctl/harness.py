"""Run configuration, ablation orchestration, and report emission.

Config files are flat ``key = value`` text (``#`` comments allowed). Every
key has a typed entry in ``CONFIG_KEYS``; unknown keys are rejected and
range violations name the offending key. Memory-sized values accept a
``GiB`` or ``bytes`` suffix (GiB is binary, 2**30 bytes).

An ablation run executes every configured (mode, seed) episode with
matched environment noise (keyed per query, so modes see identical
perturbations for identical queries), then writes:

* ``logs/<mode>_seed<N>.jsonl`` -- one JSON object per step,
* ``episodes_<mode>.csv`` -- per-seed final metrics,
* ``summary.csv`` -- the ablation table (display form),
* ``summary_stats.csv`` -- full numeric statistics,
* ``figures/<mode>_curves.csv`` / ``_points.csv`` -- plot-ready data,
* ``config_reference.txt`` -- every config key with its default.

All outputs are byte-identical across re-runs with the same inputs.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .agents import OracleParams, StudentParams
from .controller import (
    AblationTable,
    ControllerConfig,
    EpisodeRecord,
    METRIC_NAMES,
    Mode,
    run_episode,
    summarize_ablation,
)
from .errors import ConfigError
from .feasibility import GIB, ModelSpec
from .mfbo import EnvSettings, GPConfig, default_catalog, gp_posterior, _ground_truth_vec

FIGURE_GRID_RESOLUTION = 512


@dataclass(frozen=True)
class RunConfig:
    env: EnvSettings = EnvSettings()
    controller: ControllerConfig = ControllerConfig()
    student: StudentParams = StudentParams()
    nodistill_saturation_obs: int = 600
    modes: tuple[Mode, ...] = tuple(Mode)
    seeds: tuple[int, ...] = tuple(range(20))

    def __post_init__(self):
        if not self.modes:
            raise ConfigError("at least one mode is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    def student_for(self, mode: Mode) -> StudentParams:
        if mode is Mode.NO_DISTILL:
            return dataclasses.replace(self.student, saturation_obs=self.nodistill_saturation_obs)
        return self.student


def _parse_memory(raw: str) -> int:
    text = raw.strip()
    lowered = text.lower()
    if lowered.endswith("gib"):
        return int(float(text[:-3].strip()) * GIB)
    if lowered.endswith("bytes"):
        return int(text[:-5].strip())
    return int(text)


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_modes(raw: str) -> tuple[Mode, ...]:
    out = []
    for part in raw.split(","):
        part = part.strip()
        if part:
            out.append(Mode(part))
    return tuple(out)


def _parse_seeds(raw: str) -> tuple[int, ...]:
    return tuple(int(p.strip()) for p in raw.split(",") if p.strip())


@dataclass(frozen=True)
class ConfigKey:
    parse: Callable[[str], object]
    default: object
    help: str
    check: Callable[[object], bool] = lambda v: True
    expected: str = ""


def _positive(v) -> bool:
    return v > 0


def _non_negative(v) -> bool:
    return v >= 0


CONFIG_KEYS: dict[str, ConfigKey] = {
    # environment
    "budget": ConfigKey(float, 150.0, "total evaluation budget in minutes", _positive, "positive real"),
    "eta": ConfigKey(float, 0.15, "surrogate noise scale (std at fidelity 0)", _non_negative, "non-negative real"),
    "lengthscale": ConfigKey(float, 0.8, "GP kernel lengthscale", _positive, "positive real"),
    "signal_var": ConfigKey(float, 1.0, "GP kernel signal variance", _positive, "positive real"),
    # controller
    "kappa": ConfigKey(int, 8, "max exemplar evaluations kept by projection", _positive, "positive integer"),
    "intervals": ConfigKey(int, 4, "interval count for state summaries", _positive, "positive integer"),
    "drift_window": ConfigKey(int, 8, "window length for drift detection", _positive, "positive integer"),
    "drift_threshold": ConfigKey(float, 0.5, "mean point-gap (domain units) that flags drift", _non_negative, "non-negative real"),
    "mismatch_limit": ConfigKey(float, 0.25, "model-index mismatch fraction that flags drift", lambda v: 0 <= v <= 1, "real in [0, 1]"),
    "buffer_lo": ConfigKey(int, 4, "replay buffer lower bound", _positive, "positive integer"),
    "buffer_hi": ConfigKey(int, 32, "replay buffer upper bound", _positive, "positive integer"),
    "finetune_trigger": ConfigKey(int, 4, "buffered pairs that trigger a fine-tune event", _positive, "positive integer"),
    "oracle_call_cost": ConfigKey(float, 0.01, "currency cost per oracle consultation", _non_negative, "non-negative real"),
    # oracle policy
    "ucb_kappa": ConfigKey(float, 2.0, "oracle exploration weight", _non_negative, "non-negative real"),
    "cheap_threshold": ConfigKey(float, 0.9, "budget fraction below which the oracle uses the cheapest model", lambda v: 0 <= v <= 1, "real in [0, 1]"),
    "confirm_budget": ConfigKey(float, 12.0, "final minutes spent confirming the believed best point at high fidelity", _non_negative, "non-negative real"),
    # student behavior
    "schema_fail_prob": ConfigKey(float, 0.005, "base probability of a malformed response", lambda v: 0 <= v <= 1, "real in [0, 1]"),
    "semantic_noise_std": ConfigKey(float, 0.7, "initial point-noise std (domain units)", _non_negative, "non-negative real"),
    "saturation_obs": ConfigKey(int, 2160, "observed token threshold of the distilled student", _positive, "positive integer"),
    "adapt_factor": ConfigKey(float, 0.35, "per-fine-tune multiplicative noise reduction", lambda v: 0 < v < 1, "real in (0, 1)"),
    "noise_floor": ConfigKey(float, 0.25, "semantic noise floor after adaptation", _non_negative, "non-negative real"),
    "student_grid": ConfigKey(int, 16, "grid resolution of the independent student's search", _positive, "positive integer"),
    "student_ucb_kappa": ConfigKey(float, 2.0, "independent student exploration weight", _non_negative, "non-negative real"),
    "student_fidelity_rule": ConfigKey(str, "cheapest", "independent student fidelity rule: cheapest / random_affordable / max_affordable"),
    "nodistill_saturation_obs": ConfigKey(int, 600, "observed token threshold of the non-distilled student", _positive, "positive integer"),
    # deployed model profile
    "layers": ConfigKey(int, 32, "transformer layer count", _positive, "positive integer"),
    "kv_heads": ConfigKey(int, 8, "key/value head count", _positive, "positive integer"),
    "head_dim": ConfigKey(int, 128, "attention head dimension", _positive, "positive integer"),
    "bytes_per_value": ConfigKey(int, 2, "bytes per cached key/value entry", _positive, "positive integer"),
    "batch": ConfigKey(int, 1, "batch size", _positive, "positive integer"),
    "context_window": ConfigKey(int, 131072, "nominal context window in tokens", _positive, "positive integer"),
    "mem_total": ConfigKey(_parse_memory, 24 * GIB, "device memory (bytes; GiB suffix allowed)", _non_negative, "non-negative bytes"),
    "mem_weights": ConfigKey(_parse_memory, 16 * GIB, "model weight memory (bytes; GiB suffix allowed)", _non_negative, "non-negative bytes"),
    "mem_misc": ConfigKey(_parse_memory, 2 * GIB, "runtime overhead memory (bytes; GiB suffix allowed)", _non_negative, "non-negative bytes"),
    "q_eff": ConfigKey(float, 3.25, "effective query-norm bound", _non_negative, "non-negative real"),
    "k_eff": ConfigKey(float, 2.71, "effective key-norm bound", _non_negative, "non-negative real"),
    "relevant_size": ConfigKey(int, 50, "task-relevant subsequence size (tokens)", _positive, "positive integer"),
    "tau": ConfigKey(float, 0.1, "required attention mass on the relevant subsequence", lambda v: 0 < v <= 1, "real in (0, 1]"),
    # run layout
    "modes": ConfigKey(_parse_modes, tuple(Mode), "comma-separated modes to run"),
    "seeds": ConfigKey(_parse_seeds, tuple(range(20)), "comma-separated integer seeds", lambda v: len(v) > 0, "nonempty seed list"),
}


def parse_kv_file(path: str | Path) -> dict[str, object]:
    """Typed parse of a flat key=value file against the key registry."""
    values: dict[str, object] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        entry = CONFIG_KEYS[key]
        try:
            value = entry.parse(raw.strip())
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
        if not entry.check(value):
            raise ConfigError(
                f"{path}:{lineno}: {key!r} out of range (expected {entry.expected}), got {raw.strip()!r}"
            )
        values[key] = value
    return values


def _value(values: dict, key: str):
    return values.get(key, CONFIG_KEYS[key].default)


def build_config(values: dict[str, object]) -> RunConfig:
    spec = ModelSpec(
        layers=_value(values, "layers"),
        kv_heads=_value(values, "kv_heads"),
        head_dim=_value(values, "head_dim"),
        bytes_per_value=_value(values, "bytes_per_value"),
        batch=_value(values, "batch"),
        context_window=_value(values, "context_window"),
        mem_total=_value(values, "mem_total"),
        mem_weights=_value(values, "mem_weights"),
        mem_misc=_value(values, "mem_misc"),
        q_eff=_value(values, "q_eff"),
        k_eff=_value(values, "k_eff"),
        relevant_size=_value(values, "relevant_size"),
        attention_threshold=_value(values, "tau"),
    )
    oracle = OracleParams(
        ucb_kappa=_value(values, "ucb_kappa"),
        interval_count=_value(values, "intervals"),
        cheap_threshold=_value(values, "cheap_threshold"),
        confirm_budget=_value(values, "confirm_budget"),
    )
    controller = ControllerConfig(
        spec=spec,
        kappa_exemplars=_value(values, "kappa"),
        interval_count=_value(values, "intervals"),
        drift_window=_value(values, "drift_window"),
        drift_threshold=_value(values, "drift_threshold"),
        model_mismatch_limit=_value(values, "mismatch_limit"),
        buffer_lo=_value(values, "buffer_lo"),
        buffer_hi=_value(values, "buffer_hi"),
        oracle_call_cost=_value(values, "oracle_call_cost"),
        finetune_trigger=_value(values, "finetune_trigger"),
        oracle=oracle,
    )
    student = StudentParams(
        schema_fail_prob=_value(values, "schema_fail_prob"),
        semantic_noise_std=_value(values, "semantic_noise_std"),
        saturation_obs=_value(values, "saturation_obs"),
        adapt_factor=_value(values, "adapt_factor"),
        noise_floor=_value(values, "noise_floor"),
        grid_resolution=_value(values, "student_grid"),
        ucb_kappa=_value(values, "student_ucb_kappa"),
        fidelity_rule=_value(values, "student_fidelity_rule"),
    )
    env = EnvSettings(
        budget=_value(values, "budget"),
        eta=_value(values, "eta"),
        lengthscale=_value(values, "lengthscale"),
        signal_var=_value(values, "signal_var"),
    )
    try:
        return RunConfig(
            env=env,
            controller=controller,
            student=student,
            nodistill_saturation_obs=_value(values, "nodistill_saturation_obs"),
            modes=_value(values, "modes"),
            seeds=_value(values, "seeds"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a config file; missing keys take their defaults."""
    return build_config(parse_kv_file(path))


def write_reference_config(path: str | Path) -> None:
    """Emit a reference file documenting every key and its default."""
    lines = ["# configuration reference: every key with its default value", ""]
    for key, entry in CONFIG_KEYS.items():
        default = entry.default
        if key in ("mem_total", "mem_weights", "mem_misc"):
            default = f"{default // GIB} GiB" if default % GIB == 0 else f"{default} bytes"
        elif key == "modes":
            default = ",".join(m.value for m in default)
        elif key == "seeds":
            default = ",".join(str(s) for s in default)
        lines.append(f"# {entry.help}")
        lines.append(f"{key} = {default}")
        lines.append("")
    Path(path).write_text("\n".join(lines))


# --- artifact emission -------------------------------------------------------

STEP_LOG_KEYS = (
    "step", "state", "projected", "raw", "model", "point",
    "error", "valid", "drift", "oracle_called", "evaluated", "wasted",
)

OUTPUT_SCHEMAS = {
    "step_log": STEP_LOG_KEYS,
    "episodes_csv": (
        "seed", "x_regret", "f_regret", "num_points", "hierarchical_frequency",
        "oracle_cost", "steps", "finetune_events", "wasted_total",
    ),
    "summary_csv": ("Mode", "Dist. to optimal", "Num. Points", "Hierar. Freq. (%)", "Cost ($)"),
    "summary_stats_csv": tuple(
        ["mode", "n_seeds"]
        + [f"{metric}_{stat}" for metric in METRIC_NAMES for stat in ("mean", "hw95", "median")]
    ),
    "curves_csv": tuple(
        ["x", "ground_truth"]
        + [f"p{i}_{part}" for i in (1, 2, 3, 4) for part in ("mean", "lo", "hi")]
        + ["gp_mean", "gp_lo", "gp_hi"]
    ),
    "points_csv": ("x", "y", "fidelity"),
}


def _step_to_json(step) -> str:
    payload = {
        "step": step.step,
        "state": step.state_digest,
        "projected": step.projected_digest,
        "raw": step.raw_message,
        "model": step.model,
        "point": step.point,
        "error": step.error_gap,
        "valid": step.valid,
        "drift": step.drift,
        "oracle_called": step.oracle_called,
        "evaluated": step.evaluated,
        "wasted": step.wasted,
    }
    return json.dumps(payload, sort_keys=True)


def write_episode_log(record: EpisodeRecord, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        for step in record.steps:
            fh.write(_step_to_json(step) + "\n")


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_episode_metrics(records: Sequence[EpisodeRecord], out_dir: Path) -> None:
    by_mode: dict[Mode, list[EpisodeRecord]] = {}
    for rec in records:
        by_mode.setdefault(rec.mode, []).append(rec)
    for mode, recs in by_mode.items():
        rows = [
            [
                rec.seed,
                _fmt(rec.metrics.x_regret),
                _fmt(rec.metrics.f_regret),
                rec.metrics.num_points,
                _fmt(rec.metrics.hierarchical_frequency),
                _fmt(rec.metrics.oracle_cost),
                rec.total_steps,
                rec.finetune_events,
                _fmt(rec.wasted_total),
            ]
            for rec in sorted(recs, key=lambda r: r.seed)
        ]
        _write_csv(out_dir / f"episodes_{mode.value}.csv", OUTPUT_SCHEMAS["episodes_csv"], rows)


def write_summary(table: AblationTable, out_dir: Path) -> None:
    display_rows = []
    stats_rows = []
    for row in sorted(table.rows, key=lambda r: list(Mode).index(r.mode)):
        freq_note = " (n=1)" if row.single_seed else ""
        display_rows.append(
            [
                row.mode.display_name,
                f"{row.mean['x_regret']:.4f} ± {row.half_width['x_regret']:.4f}",
                f"{row.mean['num_points']:.2f} ± {row.half_width['num_points']:.2f}",
                f"{100 * row.mean['hierarchical_frequency']:.2f} ± {100 * row.half_width['hierarchical_frequency']:.2f}{freq_note}",
                f"{row.mean['oracle_cost']:.2f} ± {row.half_width['oracle_cost']:.2f}",
            ]
        )
        stats = [row.mode.value, row.n_seeds]
        for metric in METRIC_NAMES:
            stats += [_fmt(row.mean[metric]), _fmt(row.half_width[metric]), _fmt(row.median[metric])]
        stats_rows.append(stats)
    _write_csv(out_dir / "summary.csv", OUTPUT_SCHEMAS["summary_csv"], display_rows)
    _write_csv(out_dir / "summary_stats.csv", OUTPUT_SCHEMAS["summary_stats_csv"], stats_rows)


def format_summary_text(table: AblationTable) -> str:
    """Aligned text rendition of the ablation table."""
    header = OUTPUT_SCHEMAS["summary_csv"]
    rows = [header]
    for row in sorted(table.rows, key=lambda r: list(Mode).index(r.mode)):
        rows.append(
            [
                row.mode.display_name,
                f"{row.mean['x_regret']:.4f} ± {row.half_width['x_regret']:.4f}",
                f"{row.mean['num_points']:.2f} ± {row.half_width['num_points']:.2f}",
                f"{100 * row.mean['hierarchical_frequency']:.2f} ± {100 * row.half_width['hierarchical_frequency']:.2f}",
                f"{row.mean['oracle_cost']:.2f} ± {row.half_width['oracle_cost']:.2f}",
            ]
        )
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in rows]
    return "\n".join(lines)


def emit_figures_data(records: Sequence[EpisodeRecord], cfg: RunConfig, out_dir: Path) -> None:
    """Per-mode plot-ready CSVs: objective, surrogate bands, final GP band,
    and the representative (first-seed) episode's evaluated points."""
    if not records:
        raise ValueError("no records to emit")
    catalog = default_catalog(cfg.env.eta)
    gp = GPConfig.for_catalog(catalog, cfg.env.lengthscale, cfg.env.signal_var)
    lo, hi = cfg.env.domain
    xs = np.linspace(lo, hi, FIGURE_GRID_RESOLUTION)
    truth = _ground_truth_vec(xs)

    by_mode: dict[Mode, list[EpisodeRecord]] = {}
    for rec in records:
        by_mode.setdefault(rec.mode, []).append(rec)

    for mode, recs in by_mode.items():
        rep = min(recs, key=lambda r: cfg.seeds.index(r.seed) if r.seed in cfg.seeds else len(cfg.seeds))
        mean, std = gp_posterior(tuple(rep.evaluations), xs, gp)
        rows = []
        for i, x in enumerate(xs):
            row = [_fmt(float(x)), _fmt(float(truth[i]))]
            for model in catalog:
                half = 2.0 * model.noise_scale
                row += [_fmt(float(truth[i])), _fmt(float(truth[i] - half)), _fmt(float(truth[i] + half))]
            row += [
                _fmt(float(mean[i])),
                _fmt(float(mean[i] - 2.0 * std[i])),
                _fmt(float(mean[i] + 2.0 * std[i])),
            ]
            rows.append(row)
        _write_csv(out_dir / "figures" / f"{mode.value}_curves.csv", OUTPUT_SCHEMAS["curves_csv"], rows)

        point_rows = [
            [_fmt(e.x), _fmt(e.y), e.fidelity] for e in rep.evaluations
        ]
        _write_csv(out_dir / "figures" / f"{mode.value}_points.csv", OUTPUT_SCHEMAS["points_csv"], point_rows)


def run_ablation(cfg: RunConfig, out_dir: str | Path) -> AblationTable:
    """Execute every (mode, seed) episode with matched seeds and flush all
    artifacts; episode logs are written as episodes finish, so partial
    output survives a failure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_reference_config(out / "config_reference.txt")
    records: list[EpisodeRecord] = []
    for seed in cfg.seeds:
        for mode in cfg.modes:
            record = run_episode(mode, cfg.env, cfg.controller, cfg.student_for(mode), seed)
            write_episode_log(record, out / "logs" / f"{mode.value}_seed{seed}.jsonl")
            records.append(record)
    write_episode_metrics(records, out)
    table = summarize_ablation(records)
    write_summary(table, out)
    emit_figures_data(records, cfg, out)
    return table
