"""Experiment drivers behind the CLI verbs: train, eval, ablation, sweep, dataset-gen.

Every artifact carries the config hash and seed. Nothing time-dependent is
written, so identical inputs give byte-identical outputs.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import VARIANT_FLAGS, ConfigError, ExperimentConfig, MMPTConfig
from .metrics import MetricsSummary, evaluate_scores, open_world_accuracy, save_summary
from .model import MMPT
from .scores import ScoreTableError, load_score_table
from .space import CompositionSpace, default_space, load_space, save_space, space_from_dict
from .synthetic import Dataset, default_render_spec, export_dataset, import_dataset, make_dataset
from .training import init_state, train_loop

log = logging.getLogger(__name__)

ABLATION_VARIANTS = ("coop_text_only", "coop_plus_visual", "coop_plus_shared", "mmpt_full")
METRIC_COLUMNS = ("S", "U", "HM", "AUC")


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class SweepPreset:
    name: str
    axis: str  # one of m, h_s, d_s, L_p
    label: str  # column header in the emitted table
    values: tuple
    base: MMPTConfig

    def __post_init__(self):
        if self.axis not in AXIS_FIELDS:
            raise ConfigError(f"sweep axis {self.axis!r} is not one of {sorted(AXIS_FIELDS)}")
        if not self.values or any(v <= 0 for v in self.values):
            raise ConfigError("sweep values must be positive")


AXIS_FIELDS = {"m": "n_ctx", "h_s": "h_s", "d_s": "d_s", "L_p": "prompt_len"}

# the depth sweep needs room for h_s up to 12
_DEEP = MMPTConfig(h_v=12, h_a=12, h_o=12)

SWEEP_PRESETS = {
    "ctx": SweepPreset("ctx", "m", "Ctx", (1, 2, 4, 6, 8), MMPTConfig()),
    "depth": SweepPreset("depth", "h_s", "Depth", (2, 4, 6, 9, 12), _DEEP),
    "dim": SweepPreset("dim", "d_s", "Dim", (64, 128, 256, 512), MMPTConfig()),
    "length": SweepPreset("length", "L_p", "Length", (2, 4, 6, 8, 10), MMPTConfig()),
}


# ---------------------------------------------------------------- data


def build_space(cfg: ExperimentConfig) -> CompositionSpace:
    return load_space(cfg.data.space_file) if cfg.data.space_file else default_space()


def build_data(cfg: ExperimentConfig, space: CompositionSpace | None = None):
    """(space, train, val, test) for an experiment config."""
    space = space or build_space(cfg)
    m = cfg.model
    if (m.n_attributes, m.n_objects) != (space.n_attributes, space.n_objects):
        raise ConfigError(f"model.n_attributes/n_objects = {m.n_attributes}/{m.n_objects} but the space has "
                          f"{space.n_attributes}/{space.n_objects}")
    d = cfg.data
    spec = default_render_spec(space.n_attributes, space.n_objects, (m.image_size, m.image_size),
                               shift=d.image_shift, scale_jitter=d.scale_jitter, outline=d.outline)
    train, val, test = make_dataset(space, spec, d.n_per_seen_train, d.n_per_pair_eval, d.seed)
    return space, train, val, test


def dataset_hash(*datasets: Dataset) -> str:
    h = hashlib.sha256()
    for ds in datasets:
        h.update(f"{ds.split}:{ds.content_hash()};".encode())
    return h.hexdigest()[:16]


def header_line(**fields) -> str:
    return "# " + ", ".join(f"{k}={v}" for k, v in fields.items())


# ---------------------------------------------------------------- evaluation


def evaluate_model(model: MMPT, data: Dataset, space: CompositionSpace):
    """Score a dataset and run the open-world sweep; returns (table, curve, summary, bias-0 accuracy)."""
    table = model.score_table(data.images(), data.sample_ids(), data.labels(), space)
    curve, summary = evaluate_scores(table, space)
    acc = open_world_accuracy(table.composition_scores(), table.labels, space)
    return table, curve, summary, acc


def write_eval_outputs(out: Path, curve, summary: MetricsSummary, header: dict, **extra) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "curve.csv", "w", newline="") as f:
        f.write(header_line(**header) + "\n")
        w = csv.writer(f)
        w.writerow(["bias", "seen", "unseen"])
        for b, s, u in curve.points():
            w.writerow([repr(b), repr(s), repr(u)])
    save_summary(summary, out / "summary.json", **header, **extra)


# ---------------------------------------------------------------- train


def run_training(cfg: ExperimentConfig, out_dir=None, resume=None) -> dict:
    """Train one configuration end to end; optionally writes artifacts into ``out_dir``.

    Returns a dict with the model, state, summary, bias-0 accuracy and hashes.
    """
    space, train, val, test = build_data(cfg)
    eval_data = test if cfg.eval.split == "test" else val
    chash, dhash = cfg.hash(), dataset_hash(train, val, test)
    header = {"config_hash": chash, "dataset_hash": dhash, "seed": cfg.seed}

    if resume is not None:
        model, state, _ = load_checkpoint(resume, expected_config_hash=chash)
        state.placement = cfg.training.placement
    else:
        model = MMPT(cfg.resolved_model())
        state = init_state(model, cfg.training.lr, cfg.seed, cfg.training.partition, cfg.training.placement)

    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "a" if resume else "w")
        if not resume:
            log_file.write(json.dumps(header, sort_keys=True) + "\n")

    def on_record(record):
        if log_file is not None:
            log_file.write(json.dumps(record, sort_keys=True) + "\n")

    def eval_hook(m):
        _, _, summary, _ = evaluate_model(m, eval_data, space)
        return summary.to_dict()

    try:
        remaining = max(cfg.training.steps - state.step, 0)
        train_loop(model, state, train, remaining, cfg.training.batch_size, eval_hook, cfg.eval.eval_every,
                   on_record)
    finally:
        if log_file is not None:
            log_file.close()

    table, curve, summary, acc = evaluate_model(model, eval_data, space)
    extra = {"variant": cfg.variant, "step": state.step, "split": cfg.eval.split,
             "unseen_top1": acc["unseen"], "seen_top1": acc["seen"]}
    if out is not None:
        save_checkpoint(model, state, out / "checkpoint", config_hash=chash,
                        extra={"partition": cfg.training.partition, "experiment": cfg.to_dict(),
                               "space": space.to_dict(), "dataset_hash": dhash})
        table.save_json(out / "scores.json")
        write_eval_outputs(out, curve, summary, header, **extra)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return {"model": model, "state": state, "summary": summary, "accuracy": acc, "curve": curve,
            "table": table, "config_hash": chash, "dataset_hash": dhash}


def apply_overrides(cfg: ExperimentConfig, seed: int | None = None, steps: int | None = None) -> ExperimentConfig:
    if seed is not None:
        cfg = cfg.replace(seed=int(seed))
    if steps is not None:
        cfg = cfg.replace(training=dataclasses.replace(cfg.training, steps=int(steps)))
    return cfg


def cmd_train(cfg: ExperimentConfig, out_dir, resume=None) -> MetricsSummary:
    result = run_training(cfg, out_dir, resume)
    s = result["summary"]
    log.info("trained %s seed %d: S=%.2f U=%.2f HM=%.2f AUC=%.2f", cfg.variant, cfg.seed, s.S, s.U, s.HM, s.AUC)
    return s


# ---------------------------------------------------------------- eval


def _space_from_checkpoint(manifest: dict) -> CompositionSpace | None:
    d = manifest.get("extra", {}).get("space")
    return space_from_dict(d) if d else None


def cmd_eval(out_dir, *, checkpoint=None, dataset_dir=None, score_table=None, space_file=None,
             config: ExperimentConfig | None = None, force: bool = False) -> MetricsSummary:
    """Evaluate a checkpoint on a dataset, or a bare score table (model-free mode)."""
    out = Path(out_dir)
    if score_table is not None:
        space = load_space(space_file) if space_file else None
        table = load_score_table(score_table, space)
        if table.space is None:
            raise ScoreTableError("score table has no embedded space; pass a space file")
        space = table.space
        if list(table.attributes) != list(space.attributes.names) or list(table.objects) != list(space.objects.names):
            raise ScoreTableError("space mismatch: score table labels differ from the space labels")
        curve, summary = evaluate_scores(table, space)
        digest = hashlib.sha256(Path(score_table).read_bytes()).hexdigest()[:16]
        write_eval_outputs(out, curve, summary, {"score_table_hash": digest})
        return summary

    if checkpoint is None:
        raise ExperimentError("eval needs --checkpoint or --score-table")
    expected = config.hash() if config is not None else None
    model, state, manifest = load_checkpoint(checkpoint, expected_config_hash=expected, force=force)
    ckpt_space = _space_from_checkpoint(manifest)
    if dataset_dir is not None:
        data = import_dataset(dataset_dir)
        space = data.space
        if ckpt_space is not None and not ckpt_space.same_labels(space):
            raise ExperimentError("space mismatch: dataset attribute/object labels differ from the checkpoint's")
        header = {"config_hash": manifest["config_hash"], "dataset_hash": dataset_hash(data),
                  "seed": manifest["seed"]}
    else:
        exp = config
        if exp is None and "experiment" in manifest.get("extra", {}):
            exp = ExperimentConfig.from_dict(manifest["extra"]["experiment"])
        if exp is None:
            raise ExperimentError("no dataset given and the checkpoint does not record its experiment config")
        space, train, val, test = build_data(exp)
        if ckpt_space is not None and not ckpt_space.same_labels(space):
            raise ExperimentError("space mismatch: config space labels differ from the checkpoint's")
        data = test if exp.eval.split == "test" else val
        header = {"config_hash": manifest["config_hash"], "dataset_hash": dataset_hash(train, val, test),
                  "seed": manifest["seed"]}
    table, curve, summary, acc = evaluate_model(model, data, space)
    out.mkdir(parents=True, exist_ok=True)
    table.save_json(out / "scores.json")
    write_eval_outputs(out, curve, summary, header, step=manifest["step"], unseen_top1=acc["unseen"],
                       seen_top1=acc["seen"])
    return summary


# ---------------------------------------------------------------- tables


def _fmt(v) -> str:
    return "" if v is None else f"{v:.4f}"


def write_table(path: Path, header: dict, columns, rows) -> None:
    with open(path, "w", newline="") as f:
        f.write(header_line(**header) + "\n")
        w = csv.writer(f)
        w.writerow(columns)
        for row in rows:
            w.writerow(row)


def read_table(path) -> tuple[str, list[dict]]:
    """(header line, rows as dicts) of a table written by ``write_table``."""
    with open(path, newline="") as f:
        header = f.readline().rstrip("\n")
        return header, list(csv.DictReader(f))


def cmd_ablation(base: ExperimentConfig, out_dir) -> Path:
    """Train all four variants on identical data and seeds; writes ablation.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, dhash = [], None
    for variant in ABLATION_VARIANTS:
        cfg = base.replace(variant=variant)
        result = run_training(cfg, out / variant)
        if dhash is not None and result["dataset_hash"] != dhash:
            raise ExperimentError("variants were trained on different data")
        dhash = result["dataset_hash"]
        s = result["summary"]
        rows.append([variant] + [_fmt(getattr(s, k)) for k in METRIC_COLUMNS])
    path = out / "ablation.csv"
    write_table(path, {"dataset_hash": dhash, "config_hash": base.hash(), "seed": base.seed},
                ("Variant",) + METRIC_COLUMNS, rows)
    return path


def sweep_config(base: ExperimentConfig, preset: SweepPreset, value) -> ExperimentConfig:
    """Base experiment with the preset's model base and one axis value applied."""
    model = preset.base.replace(**{AXIS_FIELDS[preset.axis]: int(value)})
    return base.replace(model=model)


def cmd_sweep(preset_name: str, out_dir, base: ExperimentConfig | None = None) -> Path:
    """One row per axis value; a row whose config is invalid gets an error entry instead of metrics."""
    if preset_name not in SWEEP_PRESETS:
        raise ConfigError(f"unknown sweep preset {preset_name!r}; choose from {sorted(SWEEP_PRESETS)}")
    preset = SWEEP_PRESETS[preset_name]
    base = base or ExperimentConfig()
    if base.model != MMPTConfig():
        # a caller-supplied model section replaces the preset's base model
        preset = SweepPreset(preset.name, preset.axis, preset.label, preset.values, base.model)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results, dhash = {}, None
    for value in preset.values:
        try:
            cfg = sweep_config(base, preset, value)
            result = run_training(cfg, out / f"{preset.name}_{value}")
        except (ConfigError, ValueError) as e:
            log.warning("%s=%s failed: %s", preset.label, value, e)
            results[value] = [None] * len(METRIC_COLUMNS) + [str(e)]
            continue
        dhash = result["dataset_hash"]
        s = result["summary"]
        results[value] = [getattr(s, k) for k in METRIC_COLUMNS] + [""]
    rows = [[v] + [_fmt(x) for x in results[v][:-1]] + [results[v][-1]] for v in sorted(results)]
    path = out / f"sweep_{preset.name}.csv"
    write_table(path, {"preset": preset.name, "axis": preset.axis, "dataset_hash": dhash,
                       "config_hash": base.hash(), "seed": base.seed},
                (preset.label,) + METRIC_COLUMNS + ("error",), rows)
    return path


# ---------------------------------------------------------------- dataset-gen


def cmd_dataset_gen(cfg: ExperimentConfig, out_dir) -> str:
    """Export train/val/test splits and the space; returns the dataset hash."""
    space, train, val, test = build_data(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for ds in (train, val, test):
        export_dataset(ds, out / ds.split)
    save_space(space, out / "space.json")
    dhash = dataset_hash(train, val, test)
    (out / "dataset.json").write_text(json.dumps(
        {"config_hash": cfg.hash(), "dataset_hash": dhash, "seed": cfg.seed,
         "counts": {ds.split: len(ds) for ds in (train, val, test)}}, indent=2, sort_keys=True) + "\n")
    return dhash


__all__ = [
    "ABLATION_VARIANTS", "ExperimentError", "SWEEP_PRESETS", "SweepPreset", "VARIANT_FLAGS",
    "apply_overrides", "build_data", "cmd_ablation", "cmd_dataset_gen", "cmd_eval", "cmd_sweep", "cmd_train",
    "dataset_hash", "evaluate_model", "read_table", "run_training", "sweep_config",
]
