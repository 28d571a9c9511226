"""Experiment orchestration: train-teacher -> prune -> distill -> report.

Configs are strict-schema JSON; unknown keys are errors, since a silent
hyperparameter typo is the main reproducibility hazard. Every stage is a
pure function of (config, seeds), all randomness flows through labeled
streams derived from the seeds, and all outputs land in per-seed
directories so independent seeds can run as separate processes.
"""

from __future__ import annotations

import csv
import io
import json
import os
from importlib import resources
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import diagnostics as diag
from .data import Dataset, Standardizer, load_csv, load_idx, score_batch, \
    split_dataset, synth_blobs, synth_spirals
from .distill import DistillConfig, RunRecord, cosine_lr, train, train_supervised
from .errors import ConfigError
from .model import Parameters, forward, init_params, preset
from .pruning import PruneConfig, PruneMask, compute_scores, make_channel_mask, \
    make_mask, prunable_indices, sparsity_report
from .seeding import derive_seed, stream

DEFAULT_CONFIG = {
    "dataset": {"kind": "spirals", "classes": 4, "per_class": 500, "noise": 0.15,
                "turns": 1.5, "dim": 2, "spread": 0.5, "seed": 0,
                "test_fraction": 0.2, "standardize": True,
                "train_images": None, "train_labels": None,
                "test_images": None, "test_labels": None,
                "train": None, "test": None, "limit": None},
    "teacher": {"preset": "mlp-teacher", "epochs": 40, "lr": 0.1, "lr_min": 0.0,
                "momentum": 0.9, "weight_decay": 5e-4, "batch_size": 128, "seed": 0},
    "student": {"preset": "mlp-small"},
    "prune": {"criterion": "lnpt", "ratio": 0.95, "mode": "unstructured",
              "score_batch_per_class": 10, "hessian_samples": 8,
              "hessian_mode": "auto", "score_sampling": "balanced-pseudo"},
    "distill": {"mode": "lnpt", "alpha": 1.0, "temp": 4.0, "epochs": 30,
                "lr": 0.1, "lr_min": 0.0, "momentum": 0.9, "weight_decay": 5e-4,
                "batch_size": 128, "symmetric_temp": False},
    "diagnostics": {"ntk": False, "probe_batch": 16, "learning_gap": False},
    "dtype": "float64",
    "seeds": [0],
    "out_dir": "runs/exp",
}

_DATASET_KINDS = ("spirals", "blobs", "idx", "csv")


def _merge_validate(user: dict, defaults: dict, path: str = "") -> dict:
    out = {}
    for key, val in user.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict) and isinstance(val, dict):
            out[key] = _merge_validate(val, defaults[key], path + key + ".")
        else:
            out[key] = val
    for key, val in defaults.items():
        if key not in out:
            out[key] = json.loads(json.dumps(val))  # deep copy
    return out


def validate_config(cfg: dict) -> dict:
    cfg = _merge_validate(cfg, DEFAULT_CONFIG)
    if cfg["dataset"]["kind"] not in _DATASET_KINDS:
        raise ConfigError(f"unknown dataset kind {cfg['dataset']['kind']!r}")
    if not cfg["seeds"]:
        raise ConfigError("seeds must be a nonempty list")
    PruneConfig(**{**cfg["prune"], "seed": 0})  # field validation
    DistillConfig(**{**cfg["distill"], "seed": 0})
    if cfg["dtype"] not in ("float64", "float32"):
        raise ConfigError(f"dtype must be float64 or float32, got {cfg['dtype']!r}")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return validate_config(raw)


def resolve_out_dir(cfg: dict) -> Path:
    root = os.environ.get("LNPT_OUT")
    return Path(root) / cfg["out_dir"] if root else Path(cfg["out_dir"])


# ---------------------------------------------------------------------------
# dataset construction
# ---------------------------------------------------------------------------

def build_dataset(ds_cfg: dict):
    """Returns (train, test, standardizer or None, input_shape)."""
    kind = ds_cfg["kind"]
    if kind == "spirals":
        full = synth_spirals(ds_cfg["classes"], ds_cfg["per_class"],
                             ds_cfg["noise"], ds_cfg["seed"], turns=ds_cfg["turns"])
        train_ds, test_ds = split_dataset(full, ds_cfg["test_fraction"],
                                          derive_seed(ds_cfg["seed"], "split"))
    elif kind == "blobs":
        full = synth_blobs(ds_cfg["classes"], ds_cfg["per_class"], ds_cfg["dim"],
                           ds_cfg["spread"], ds_cfg["seed"])
        train_ds, test_ds = split_dataset(full, ds_cfg["test_fraction"],
                                          derive_seed(ds_cfg["seed"], "split"))
    elif kind == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not ds_cfg[key]:
                raise ConfigError(f"idx dataset needs dataset.{key}")
        train_ds = load_idx(ds_cfg["train_images"], ds_cfg["train_labels"],
                            ds_cfg["classes"])
        test_ds = load_idx(ds_cfg["test_images"], ds_cfg["test_labels"],
                           ds_cfg["classes"])
        if ds_cfg["limit"]:
            n = int(ds_cfg["limit"])
            train_ds = Dataset(train_ds.inputs[:n], train_ds.labels[:n],
                               train_ds.class_count, image_shape=train_ds.image_shape)
    elif kind == "csv":
        if not ds_cfg["train"] or not ds_cfg["test"]:
            raise ConfigError("csv dataset needs dataset.train and dataset.test")
        train_ds = load_csv(ds_cfg["train"], ds_cfg["classes"])
        test_ds = load_csv(ds_cfg["test"], ds_cfg["classes"])
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")

    std = None
    if ds_cfg["standardize"]:
        std = Standardizer.fit(train_ds.inputs)
        train_ds = Dataset(std.apply(train_ds.inputs), train_ds.labels,
                           train_ds.class_count, split="train",
                           image_shape=train_ds.image_shape)
        test_ds = Dataset(std.apply(test_ds.inputs), test_ds.labels,
                          test_ds.class_count, split="test",
                          image_shape=train_ds.image_shape)
    input_shape = train_ds.image_shape or (train_ds.inputs.shape[1],)
    return train_ds, test_ds, std, input_shape


def _model_spec(preset_name: str, input_shape, class_count: int):
    if preset_name == "cnn-small":
        return preset(preset_name, tuple(input_shape), class_count)
    return preset(preset_name, (int(np.prod(input_shape)),), class_count)


# ---------------------------------------------------------------------------
# CSV helpers
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{value:.6g}"


def write_records_csv(path, records: list[RunRecord]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(RunRecord.FIELDS)
        for r in records:
            writer.writerow([_fmt(getattr(r, name)) for name in RunRecord.FIELDS])


def write_rows_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, (float, np.floating)) or v is None
                             else str(v) for v in row])


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------

def run_train_teacher(cfg: dict) -> Path:
    """Supervised teacher training; labels are allowed here."""
    out_dir = resolve_out_dir(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds, std, input_shape = build_dataset(cfg["dataset"])
    tc = cfg["teacher"]
    spec = _model_spec(tc["preset"], input_shape, train_ds.class_count)
    params = init_params(spec, derive_seed(tc["seed"], "teacher-init"),
                         dtype=np.dtype(cfg["dtype"]))
    dconf = DistillConfig(mode="true_label", epochs=tc["epochs"], lr=tc["lr"],
                          lr_min=tc["lr_min"], momentum=tc["momentum"],
                          weight_decay=tc["weight_decay"], batch_size=tc["batch_size"],
                          seed=derive_seed(tc["seed"], "teacher-batch"))
    records = train_supervised(params, train_ds, test_ds, dconf)
    path = out_dir / "teacher.ckpt"
    extra = {"stage": "teacher", "config": cfg,
             "preprocess": std.to_dict() if std else None,
             "final_accuracy": records[-1].test_accuracy}
    ckpt.save(path, params, seed=tc["seed"], extra=extra)
    write_records_csv(out_dir / "teacher_run.csv", records)
    return path


def _load_teacher(teacher_path) -> tuple[Parameters, dict]:
    teacher_path = Path(teacher_path)
    if not teacher_path.exists():
        raise FileNotFoundError(f"teacher checkpoint not found: {teacher_path}")
    params, header, _ = ckpt.load(teacher_path)
    return params, header


def run_prune(cfg: dict, teacher_path) -> list[Path]:
    """Score + mask one student per seed; writes masked checkpoints."""
    out_dir = resolve_out_dir(cfg)
    teacher, theader = _load_teacher(teacher_path)
    train_ds, _, _, input_shape = build_dataset(cfg["dataset"])
    pc = cfg["prune"]
    spec = _model_spec(cfg["student"]["preset"], input_shape, train_ds.class_count)
    paths = []
    for seed in cfg["seeds"]:
        seed_dir = out_dir / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        student = init_params(spec, derive_seed(seed, "init"),
                              dtype=np.dtype(cfg["dtype"]))

        teacher_logits = None
        if pc["score_sampling"] == "balanced-pseudo":
            teacher_logits = forward(teacher, train_ds.inputs).logits.data
        batch = score_batch(train_ds, pc["score_sampling"],
                            pc["score_batch_per_class"],
                            seed=derive_seed(seed, "score-batch"),
                            teacher_logits=teacher_logits)

        pconf = PruneConfig(**{**pc, "seed": seed})
        rng = stream(seed, "prune-random") if pc["criterion"] == "random" \
            else stream(seed, "probes")
        scores = compute_scores(student, pconf, teacher=teacher, batch=batch, rng=rng)
        if pc["mode"] == "channel":
            mask = make_channel_mask(scores, pc["ratio"], student)
        else:
            mask = make_mask(scores, pc["ratio"], student)
        student.flat[~mask.flat] = 0.0

        path = seed_dir / "student_pruned.ckpt"
        ckpt.save(path, student, seed=seed, mask=mask.flat,
                  extra={"stage": "pruned-student", "prune": pc,
                         "preprocess": theader.get("extra", {}).get("preprocess")})
        report = sparsity_report(mask, student)
        report["criterion"] = pc["criterion"]
        report["ratio"] = pc["ratio"]
        report["seed"] = seed
        with open(seed_dir / "sparsity_report.json", "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
        paths.append(path)
    return paths


def _rebuild_mask(flat_mask: np.ndarray, student: Parameters) -> PruneMask:
    prunable = prunable_indices(student)
    kept = int(flat_mask[prunable].sum())
    return PruneMask(flat=flat_mask, kept_count=kept, total_count=prunable.size,
                     always_kept=student.count - prunable.size,
                     weight_kept=kept, weight_total=prunable.size)


def run_distill(cfg: dict, teacher_path) -> dict:
    """Label-free (or ablation-mode) training of each seed's pruned student."""
    out_dir = resolve_out_dir(cfg)
    teacher, _ = _load_teacher(teacher_path)
    train_ds, test_ds, _, _ = build_dataset(cfg["dataset"])
    dc = cfg["distill"]
    gc = cfg["diagnostics"]
    finals = {}
    for seed in cfg["seeds"]:
        seed_dir = out_dir / f"seed_{seed}"
        student_path = seed_dir / "student_pruned.ckpt"
        if not student_path.exists():
            raise FileNotFoundError(f"pruned student not found: {student_path} "
                                    "(run the prune stage first)")
        student, _, flat_mask = ckpt.load(student_path)
        mask = _rebuild_mask(flat_mask, student) if flat_mask is not None else None

        same_arch = teacher.spec == student.spec
        ref = teacher.flat.copy() if same_arch else student.flat.copy()
        ref_label = "teacher" if same_arch else "self-init"

        dconf = DistillConfig(mode=dc["mode"], alpha=dc["alpha"], temp=dc["temp"],
                              epochs=dc["epochs"], lr=dc["lr"], lr_min=dc["lr_min"],
                              momentum=dc["momentum"], weight_decay=dc["weight_decay"],
                              batch_size=dc["batch_size"],
                              symmetric_temp=dc["symmetric_temp"],
                              seed=derive_seed(seed, "batch"))

        probe = test_ds.inputs[:gc["probe_batch"]]
        teacher_probe_map = forward(teacher, probe).feature_map.data
        diag_rows = []
        s_init = diag.sensitivity(student, probe) if gc["ntk"] else None

        def epoch_hook(epoch, current, _rows=diag_rows, _s0=s_init):
            row = {"delta_ell_pred": None, "delta_ell_meas": None, "s_drift": None}
            if gc["learning_gap"]:
                pred, meas = diag.learning_gap_step(
                    current, teacher_probe_map, probe, cosine_lr(epoch, dconf))
                row["delta_ell_pred"] = float(np.linalg.norm(pred))
                row["delta_ell_meas"] = float(np.linalg.norm(meas))
            if gc["ntk"]:
                s_now = diag.sensitivity(current, probe)
                row["s_drift"] = diag.sensitivity_drift(s_now, _s0)
            _rows.append(row)

        hook = epoch_hook if (gc["ntk"] or gc["learning_gap"]) else None
        records = train(student, mask, teacher, train_ds, test_ds, dconf,
                        distance_ref=ref, epoch_hook=hook)

        write_records_csv(seed_dir / "run.csv", records)
        diag_header = ["epoch", "dtd", "mean_lm", "delta_ell_pred",
                       "delta_ell_meas", "s_drift"]
        rows = []
        for i, r in enumerate(records):
            extra = diag_rows[i] if diag_rows else {}
            rows.append([r.epoch, r.dtd, r.eval_mean_lm,
                         extra.get("delta_ell_pred"), extra.get("delta_ell_meas"),
                         extra.get("s_drift")])
        write_rows_csv(seed_dir / "diagnostics.csv", diag_header, rows)
        ckpt.save(seed_dir / "student_final.ckpt", student, seed=seed,
                  mask=flat_mask, extra={"stage": "distilled-student"})
        with open(seed_dir / "meta.json", "w") as f:
            json.dump({"seed": seed, "dtd_ref": ref_label,
                       "final_accuracy": records[-1].test_accuracy}, f,
                      indent=2, sort_keys=True)
        finals[seed] = records[-1].test_accuracy

    values = [finals[s] for s in cfg["seeds"]]
    summary = {
        "config": cfg,
        "method": cfg["prune"]["criterion"],
        "ratio": cfg["prune"]["ratio"],
        "mode": dc["mode"],
        "seeds": list(cfg["seeds"]),
        "final_accuracy": {
            "per_seed": {str(s): finals[s] for s in cfg["seeds"]},
            "mean": float(np.mean(values)),
            "std": float(np.std(values)),
        },
    }
    with open(out_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return summary


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

_REPORT_METRICS = ("test_accuracy", "loss_total", "loss_oh", "loss_fm",
                   "eval_mean_lm", "dtd", "lr")


def load_reference_rows() -> list[dict]:
    text = resources.files("lnpt").joinpath("reference_results.csv").read_text()
    return list(csv.DictReader(io.StringIO(text)))


def run_report(run_dirs, out_path=None, include_reference: bool = False,
               plots: bool = False) -> tuple[str, list[list]]:
    """Merge run directories into one long-format CSV and a comparison table."""
    rows: list[list] = []  # method, ratio, seed, epoch, metric, value
    table_entries = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        summary_path = run_dir / "summary.json"
        if not run_dir.is_dir() or not summary_path.exists():
            raise FileNotFoundError(f"run directory missing or incomplete: {run_dir}")
        with open(summary_path) as f:
            summary = json.load(f)
        method, ratio = summary["method"], summary["ratio"]
        mode = summary.get("mode", "")
        label = method if mode in ("", "lnpt") else f"{method}+{mode}"
        table_entries.append((label, ratio, summary["final_accuracy"]["mean"],
                              summary["final_accuracy"]["std"],
                              len(summary["seeds"])))
        for seed in summary["seeds"]:
            csv_path = run_dir / f"seed_{seed}" / "run.csv"
            if not csv_path.exists():
                raise FileNotFoundError(f"missing per-seed records: {csv_path}")
            with open(csv_path, newline="") as f:
                for rec in csv.DictReader(f):
                    for metric in _REPORT_METRICS:
                        if rec.get(metric, "") != "":
                            rows.append([label, ratio, seed, int(rec["epoch"]),
                                         metric, float(rec[metric])])
    if include_reference:
        for ref in load_reference_rows():
            rows.append([f"{ref['method']}@{ref['network']}/{ref['dataset']}",
                         float(ref["ratio"]), "", "", "reference_accuracy",
                         float(ref["accuracy"])])

    lines = [f"{'method':<24} {'ratio':>6} {'seeds':>5} {'accuracy':>18}"]
    for label, ratio, mean, std, n in sorted(table_entries):
        lines.append(f"{label:<24} {ratio:>6.2f} {n:>5} {mean:>12.4f} +- {std:.4f}")
    table = "\n".join(lines)

    if out_path:
        write_rows_csv(out_path, ["method", "ratio", "seed", "epoch", "metric", "value"],
                       rows)
    if plots and out_path:
        _write_plots(rows, Path(out_path).parent)
    return table, rows


def _write_plots(rows, out_dir: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir.mkdir(parents=True, exist_ok=True)
    for metric, fname in (("test_accuracy", "accuracy.png"),
                          ("eval_mean_lm", "feature_gap.png"),
                          ("dtd", "weight_distance.png")):
        series: dict[str, dict[int, list[float]]] = {}
        for label, _, seed, epoch, m, value in rows:
            if m != metric or seed == "":
                continue
            series.setdefault(label, {}).setdefault(epoch, []).append(value)
        if not series:
            continue
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, per_epoch in sorted(series.items()):
            epochs = sorted(per_epoch)
            means = [float(np.mean(per_epoch[e])) for e in epochs]
            ax.plot(epochs, means, label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel(metric)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / fname, dpi=120)
        plt.close(fig)
