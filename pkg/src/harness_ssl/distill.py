"""Iterative self-distillation: targets -> student init -> training, repeated.

Work directory layout per iteration::

    iter<i>/codebook.hrns  labels/<utt_id>.hrns  model.ckpt  train.csv  train.png  report.json
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Mapping, Optional, Sequence, Tuple

import torch

from . import container
from .audio import MfccConfig
from .encoder import (
    ConfigError,
    EncoderConfig,
    Params,
    count_params,
    init_params,
    load_checkpoint,
    param_shapes,
    save_checkpoint,
)
from .pretrain import TrainConfig, evaluate, train
from .quantizer import TargetOptions, save_codebook, save_labels, targets_for_iteration

log = logging.getLogger(__name__)

INIT_MODES = ("random", "blocked_average")
REPORT_SCHEMA_VERSION = 1
DEFAULT_SUBSET = "train"

Model = Tuple[Params, EncoderConfig]


class DistillError(RuntimeError):
    pass


class LineageError(DistillError):
    pass


# --------------------------------------------------------------------------
# structural compression


def compress_config(base: EncoderConfig, depth: Optional[int] = None, emb_d: Optional[int] = None,
                    h_attn: Optional[int] = None, d_ffn: Optional[int] = None) -> Tuple[EncoderConfig, float]:
    """Copy of ``base`` with the given axes changed, and its compression
    ``1 - count(new) / count(base)``."""
    changes = {k: v for k, v in dict(depth=depth, emb_d=emb_d, h_attn=h_attn, d_ffn=d_ffn).items()
               if v is not None}
    new = base.replace(**changes) if changes else base
    return new, delta_s(new, base)


def delta_s(student: EncoderConfig, teacher: EncoderConfig) -> float:
    return 1.0 - count_params(student) / count_params(teacher)


def check_blocked_compat(teacher: EncoderConfig, student: EncoderConfig) -> None:
    """Raise ConfigError unless blocked averaging is defined for this pair.

    Head count may differ: Q/K/V/O shapes depend only on emb_d.
    """
    for attr in ("emb_d", "d_ffn", "proj_dim", "pos_conv_kernel", "pos_conv_groups", "head_mode"):
        a, b = getattr(teacher, attr), getattr(student, attr)
        if a != b:
            raise ConfigError(
                f"blocked averaging needs equal {attr} (teacher {a}, student {b}); "
                "use random initialisation for width-changed students"
            )
    if teacher.cnn != student.cnn:
        raise ConfigError("blocked averaging needs identical CNN front-ends")
    if teacher.depth % student.depth:
        raise ConfigError(
            f"teacher depth {teacher.depth} is not divisible by student depth {student.depth}"
        )


def blocked_average_init(teacher: Model, student_config: EncoderConfig, seed: int = 0) -> Params:
    """Student layer j = mean of teacher layers [j*b, (j+1)*b), b = depth ratio.

    Everything outside the Transformer stack is copied. If the number of
    clusters differs, the prediction head keeps a fresh random init instead.
    """
    t_params, t_cfg = teacher
    check_blocked_compat(t_cfg, student_config)
    b = t_cfg.depth // student_config.depth
    fresh = init_params(student_config, seed)
    out: Params = OrderedDict()
    for name, shape in param_shapes(student_config).items():
        if name.startswith("layers."):
            j = int(name.split(".")[1])
            rest = name.split(".", 2)[2]
            block = [t_params[f"layers.{j * b + r}.{rest}"] for r in range(b)]
            out[name] = torch.stack(block).mean(dim=0) if b > 1 else block[0].clone()
        elif name in t_params and tuple(t_params[name].shape) == shape:
            out[name] = t_params[name].clone()
        else:
            out[name] = fresh[name]
    return out


# --------------------------------------------------------------------------
# schedule types


@dataclass(frozen=True)
class IterationSpec:
    index: int
    student_config: EncoderConfig
    init: str = "random"
    targets: TargetOptions = field(default_factory=TargetOptions)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=1000))
    data_subset: str = DEFAULT_SUBSET
    init_seed: int = 0

    def __post_init__(self):
        if self.index < 1:
            raise DistillError("iteration index must be >= 1")
        if self.init not in INIT_MODES:
            raise DistillError(f"unknown init {self.init!r}")
        if self.index == 1 and self.init == "blocked_average":
            raise DistillError("iteration 1 has no teacher to average from")

    def to_dict(self) -> dict:
        t = asdict(self.targets)
        return {
            "index": self.index,
            "student_config": self.student_config.to_dict(),
            "init": self.init,
            "targets": t,
            "train": self.train.to_dict(),
            "data_subset": self.data_subset,
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "IterationSpec":
        d = dict(d)
        unknown = set(d) - {"index", "student_config", "init", "targets", "train", "data_subset", "init_seed"}
        if unknown:
            raise DistillError(f"unknown iteration fields {sorted(unknown)}")
        t = dict(d.get("targets", {}))
        if "mfcc" in t:
            t["mfcc"] = MfccConfig(**t["mfcc"])
        return cls(
            index=int(d["index"]),
            student_config=EncoderConfig.from_dict(d["student_config"]),
            init=d.get("init", "random"),
            targets=TargetOptions(**t),
            train=TrainConfig.from_dict(d["train"]),
            data_subset=d.get("data_subset", DEFAULT_SUBSET),
            init_seed=int(d.get("init_seed", 0)),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class Schedule:
    iterations: List[IterationSpec]
    lineage: List[dict] = field(default_factory=list)

    def __post_init__(self):
        idx = [s.index for s in self.iterations]
        if not idx or idx[0] != 1 or any(b <= a for a, b in zip(idx, idx[1:])):
            raise DistillError(f"iteration indices must increase strictly from 1, got {idx}")

    def to_dict(self) -> dict:
        return {"iterations": [s.to_dict() for s in self.iterations]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Schedule":
        return cls([IterationSpec.from_dict(x) for x in d["iterations"]])


@dataclass
class IterationReport:
    index: int
    delta_s: Optional[float]
    n_params: int
    codebook_inertia: float
    final_loss: float
    masked_acc: float
    train_masked_acc: float
    wall_time_s: float
    spec_hash: str
    teacher_hash: Optional[str] = None
    checkpoint_hash: Optional[str] = None
    skipped: bool = False
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("skipped")
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "IterationReport":
        return cls(**json.loads(text))


# --------------------------------------------------------------------------
# running


def _subset(corpus, name: str) -> Sequence:
    if isinstance(corpus, Mapping):
        if name not in corpus:
            raise DistillError(f"data subset {name!r} not in corpus ({sorted(corpus)})")
        return corpus[name]
    if name != DEFAULT_SUBSET:
        raise DistillError(f"data subset {name!r} requested but only one corpus was given")
    return corpus


def iteration_dir(workdir, index: int, tag: str = "") -> Path:
    return Path(workdir) / f"iter{index}{tag}"


def _validate(spec: IterationSpec, teacher: Optional[Model]) -> None:
    if spec.index >= 2 and teacher is None:
        raise DistillError(f"iteration {spec.index}: a teacher checkpoint is required")
    if spec.index == 1 and teacher is not None:
        raise DistillError("iteration 1 takes no teacher")
    if spec.init == "blocked_average":
        try:
            check_blocked_compat(teacher[1], spec.student_config)
        except ConfigError as e:
            raise DistillError(f"iteration {spec.index}: {e}") from e


def run_iteration(spec: IterationSpec, teacher: Optional[Model], corpus,
                  workdir=None, teacher_hash: Optional[str] = None, tag: str = "",
                  plots: bool = True) -> Tuple[Model, IterationReport]:
    """targets -> init -> train (-> files when ``workdir`` is given)."""
    _validate(spec, teacher)
    start = time.perf_counter()
    data = _subset(corpus, spec.data_subset)
    cfg = spec.student_config
    try:
        codebook, labels = targets_for_iteration(spec.index, teacher, data, spec.targets, cfg.cnn)
        if codebook.K != cfg.num_clusters:
            raise DistillError(f"codebook K={codebook.K} but student predicts {cfg.num_clusters} clusters")
        if spec.init == "blocked_average":
            params = blocked_average_init(teacher, cfg, seed=spec.init_seed)
        else:
            params = init_params(cfg, seed=spec.init_seed)
        params, train_report = train((params, cfg), labels, data, spec.train)
        ev = evaluate((params, cfg), labels, data, spec.train.mask, spec.train.weights, seed=spec.train.seed)
    except (ValueError, RuntimeError) as e:
        if isinstance(e, DistillError):
            raise
        raise DistillError(f"iteration {spec.index}: {e}") from e

    report = IterationReport(
        index=spec.index,
        delta_s=delta_s(cfg, teacher[1]) if teacher is not None else None,
        n_params=count_params(cfg),
        codebook_inertia=codebook.inertia_history[-1],
        final_loss=ev["loss"],
        masked_acc=ev["masked_acc"],
        train_masked_acc=train_report.final["masked_acc"],
        wall_time_s=0.0,
        spec_hash=spec.digest(),
        teacher_hash=teacher_hash,
    )
    if workdir is not None:
        out = iteration_dir(workdir, spec.index, tag)
        out.mkdir(parents=True, exist_ok=True)
        save_codebook(codebook, out / "codebook.hrns")
        for utt_id in sorted(labels):
            save_labels(labels[utt_id], utt_id, out / "labels" / f"{utt_id}.hrns")
        train_report.write_csv(out / "train.csv")
        if plots:
            from .plotting import plot_training_curves

            plot_training_curves(train_report.rows, out / "train.png", f"iteration {spec.index}{tag}")
        report.checkpoint_hash = save_checkpoint(params, cfg, out / "model.ckpt")
    report.wall_time_s = round(time.perf_counter() - start, 3)
    if workdir is not None:
        (iteration_dir(workdir, spec.index, tag) / "report.json").write_text(report.to_json())
    log.info("iteration %d done: masked_acc %.3f, %.1fs", spec.index, report.masked_acc, report.wall_time_s)
    return (params, cfg), report


def _completed(spec: IterationSpec, out: Path, teacher_hash: Optional[str]) -> Optional[IterationReport]:
    """Stored report if iteration ``spec`` is complete and consistent, else None."""
    ckpt, rep_path = out / "model.ckpt", out / "report.json"
    if not (ckpt.exists() and rep_path.exists()):
        return None
    report = IterationReport.from_json(rep_path.read_text())
    if report.spec_hash != spec.digest():
        return None
    load_checkpoint(ckpt)  # surfaces checksum errors naming the file
    actual = container.file_hash(ckpt)
    if actual != report.checkpoint_hash:
        raise LineageError(f"{ckpt}: content hash {actual[:12]} does not match report {report.checkpoint_hash[:12]}")
    if report.teacher_hash != teacher_hash:
        raise LineageError(
            f"{rep_path}: recorded teacher {str(report.teacher_hash)[:12]} "
            f"but the current teacher is {str(teacher_hash)[:12]}"
        )
    report.skipped = True
    return report


def run_schedule(schedule: Schedule, corpus, workdir, plots: bool = True) -> List[IterationReport]:
    """Run iterations in order, skipping those already complete on disk.

    Once any iteration re-executes, every later one re-executes too.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    (workdir / "schedule.json").write_text(json.dumps(schedule.to_dict(), indent=2, sort_keys=True) + "\n")
    reports: List[IterationReport] = []
    teacher: Optional[Model] = None
    teacher_hash: Optional[str] = None
    dirty = False
    schedule.lineage = []
    for spec in schedule.iterations:
        out = iteration_dir(workdir, spec.index)
        report = None if dirty else _completed(spec, out, teacher_hash)
        if report is not None:
            log.info("iteration %d: skipped (up to date)", spec.index)
        else:
            dirty = True
            _, report = run_iteration(spec, teacher, corpus, workdir, teacher_hash, plots=plots)
        reports.append(report)
        schedule.lineage.append({"index": spec.index, "teacher": teacher_hash, "checkpoint": report.checkpoint_hash})
        teacher = load_checkpoint(out / "model.ckpt")
        teacher_hash = report.checkpoint_hash
    write_summary(reports, workdir / "reports.csv")
    return reports


SUMMARY_FIELDS = ("index", "n_params", "delta_s", "codebook_inertia", "final_loss", "masked_acc",
                  "train_masked_acc", "wall_time_s", "teacher_hash", "checkpoint_hash")


def write_summary(reports: Sequence[IterationReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in reports:
            w.writerow(asdict(r))


def compare_supervision(spec: IterationSpec, teacher: Model, corpus, workdir,
                        teacher_hash: Optional[str] = None, plots: bool = True):
    """Train ``spec`` twice, on raw and on PCA-compressed teacher clusters.

    Writes ``supervision_curves.csv`` (shared step grid) and a figure; returns
    ``(raw_report, pca_report, rows)``.
    """
    from dataclasses import replace

    from .pretrain import read_report_csv

    workdir = Path(workdir)
    runs = {}
    for tag, use_pca in (("raw", False), ("pca", True)):
        variant = replace(spec, targets=replace(spec.targets, use_pca=use_pca))
        _, rep = run_iteration(variant, teacher, corpus, workdir, teacher_hash, tag=f"_{tag}", plots=plots)
        runs[tag] = (rep, read_report_csv(iteration_dir(workdir, spec.index, f"_{tag}") / "train.csv"))
    raw_rows, pca_rows = runs["raw"][1], runs["pca"][1]
    if [r["step"] for r in raw_rows] != [r["step"] for r in pca_rows]:
        raise DistillError("raw and PCA runs logged different step grids")
    rows = [
        {"step": a["step"], "loss_raw": a["loss"], "masked_acc_raw": a["masked_acc"],
         "loss_pca": b["loss"], "masked_acc_pca": b["masked_acc"]}
        for a, b in zip(raw_rows, pca_rows)
    ]
    path = workdir / "supervision_curves.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    if plots:
        from .plotting import plot_curve_comparison

        for metric in ("loss", "masked_acc"):
            plot_curve_comparison({"raw": raw_rows, "PCA": pca_rows}, workdir / f"supervision_{metric}.png",
                                  metric, "supervision: raw vs PCA-compressed teacher features")
    return runs["raw"][0], runs["pca"][0], rows
