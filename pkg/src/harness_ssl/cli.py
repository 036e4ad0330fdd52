"""Command-line entry point: ``harness <command> ...``.

Exit status is 0 on success, 1 when any item or run failed, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import container
from .audio import MfccConfig, load_wav
from .config import ExperimentConfigError, load_config, load_corpora, resolve_workdir
from .corpus import ManifestError, load_corpus, read_manifest, synth_tone_corpus, write_corpus
from .distill import DistillError, Schedule, compare_supervision, delta_s, iteration_dir, run_schedule
from .encoder import (
    PRESETS,
    PUBLISHED_DELTA_S,
    PUBLISHED_PARAMS_M,
    CnnSpec,
    ConfigError,
    count_params,
    load_checkpoint,
    param_breakdown,
)
from .pretrain import TrainingError
from .quantizer import QuantizerError, TargetOptions, save_codebook, save_labels, targets_for_iteration

log = logging.getLogger("harness_ssl")

FEATURE_INDEX = "index.tsv"
FEATURE_INDEX_FIELDS = ("utt_id", "file", "num_frames", "dim", "input_hash")


class UsageError(Exception):
    pass


def _sha256(path) -> str:
    return container.file_hash(path)


# --------------------------------------------------------------------------
# features


def _feature_job(row, out_dir: Path, cfg: MfccConfig, cfg_hash: str):
    """Returns ``(status, index_row | error message)``; status in computed/skipped/failed."""
    from .audio import mfcc_features

    target = out_dir / f"{row.utt_id}.hrns"
    try:
        in_hash = _sha256(row.path)
    except OSError as e:
        return "failed", f"{row.utt_id}: cannot read {row.path}: {e.strerror or e}"
    key = f"{in_hash}:{cfg_hash}"
    if target.exists():
        try:
            meta, arrays = container.read(target)
            if meta.get("key") == key:
                f = arrays["frames"]
                return "skipped", (row.utt_id, target.name, f.shape[0], f.shape[1], in_hash)
        except container.ContainerError:
            pass  # unreadable output is simply recomputed
    try:
        feats = mfcc_features(load_wav(row.path), cfg)
    except (OSError, ValueError) as e:
        return "failed", f"{row.utt_id}: {e}"
    meta = {"kind": "features", "utt_id": row.utt_id, "source": feats.source,
            "frame_rate": feats.frame_rate, "key": key, "mfcc": asdict(cfg)}
    container.write(target, meta, {"frames": feats.frames})
    return "computed", (row.utt_id, target.name, feats.num_frames, feats.dim, in_hash)


def cmd_features(args) -> int:
    rows = read_manifest(args.manifest, check_paths=False)
    cfg = MfccConfig(args.window_ms, args.hop_ms, args.n_mels, args.n_ceps, args.delta_window)
    cfg_hash = hashlib.sha256(json.dumps(asdict(cfg), sort_keys=True).encode()).hexdigest()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        results = list(pool.map(lambda r: _feature_job(r, out_dir, cfg, cfg_hash), rows))
    counts = {"computed": 0, "skipped": 0, "failed": 0}
    index = []
    for status, payload in results:
        counts[status] += 1
        if status == "failed":
            print(f"error: {payload}", file=sys.stderr)
        else:
            index.append(payload)
    index.sort()
    with open(out_dir / FEATURE_INDEX, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(FEATURE_INDEX_FIELDS)
        w.writerows(index)
    print(f"features: {counts['computed']} computed, {counts['skipped']} skipped, "
          f"{counts['failed']} failed; dim {cfg.output_dim}")
    return 1 if counts["failed"] else 0


# --------------------------------------------------------------------------
# targets


def cmd_targets(args) -> int:
    if args.iter >= 2 and not args.teacher:
        raise UsageError(f"--iter {args.iter} requires --teacher")
    if args.iter == 1 and args.teacher:
        raise UsageError("--iter 1 clusters MFCC features and takes no --teacher")
    data = load_corpus(read_manifest(args.manifest))
    teacher = load_checkpoint(args.teacher) if args.teacher else None
    cnn = teacher[1].cnn if teacher else CnnSpec()
    opts = TargetOptions(
        K=args.k, use_pca=args.pca is not None, d_prime=args.pca or 512,
        sample_fraction=args.sample_fraction, layer=args.layer, seed=args.seed,
    )
    cb, labels = targets_for_iteration(args.iter, teacher, data, opts, cnn)
    out = Path(args.out)
    save_codebook(cb, out / "codebook.hrns")
    for utt_id in sorted(labels):
        save_labels(labels[utt_id], utt_id, out / "labels" / f"{utt_id}.hrns")
    print(f"codebook: K={cb.K} dim={cb.dim} inertia={cb.inertia_history[-1]:.6g} -> {out / 'codebook.hrns'}")
    print(f"labels: {len(labels)} utterances -> {out / 'labels'}")
    return 0


# --------------------------------------------------------------------------
# pretrain / distill / ablate-pca


def _print_reports(reports) -> None:
    for r in reports:
        if r.skipped:
            print(f"iteration {r.index}: skipped (up to date)")
        else:
            ds = "-" if r.delta_s is None else f"{r.delta_s:.4f}"
            print(f"iteration {r.index}: masked_acc {r.masked_acc:.4f} loss {r.final_loss:.4f} "
                  f"params {r.n_params} delta_s {ds} time {r.wall_time_s:.1f}s")


def _experiment(args):
    cfg = load_config(args.config)
    workdir = resolve_workdir(args.workdir, cfg)
    return cfg, workdir


def cmd_distill(args, first_only: bool = False) -> int:
    cfg, workdir = _experiment(args)
    schedule = cfg.schedule
    if first_only:
        schedule = Schedule(schedule.iterations[:1])
    cfg.write_resolved(workdir)
    corpora = load_corpora(cfg)
    reports = run_schedule(schedule, corpora, workdir, plots=not args.no_plots)
    _print_reports(reports)
    return 0


def cmd_ablate_pca(args) -> int:
    cfg, workdir = _experiment(args)
    its = cfg.schedule.iterations
    last = its[-1]
    if last.index < 2:
        raise UsageError("ablate-pca needs a schedule whose last iteration has a teacher")
    cfg.write_resolved(workdir)
    corpora = load_corpora(cfg)
    reports = run_schedule(Schedule(its[:-1]), corpora, workdir, plots=not args.no_plots)
    _print_reports(reports)
    teacher = load_checkpoint(iteration_dir(workdir, its[-2].index) / "model.ckpt")
    raw, pca, rows = compare_supervision(last, teacher, corpora, workdir, reports[-1].checkpoint_hash,
                                         plots=not args.no_plots)
    print(f"raw supervision: masked_acc {raw.masked_acc:.4f} loss {raw.final_loss:.4f}")
    print(f"PCA supervision (D'={last.targets.d_prime}): masked_acc {pca.masked_acc:.4f} loss {pca.final_loss:.4f}")
    print(f"curves: {len(rows)} rows -> {workdir / 'supervision_curves.csv'}")
    return 0


# --------------------------------------------------------------------------
# probe


def _extract_all(model, utts, include_cnn_output: bool, jobs: int):
    from .downstream import extract_frozen

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda u: extract_frozen(model, u.wave, include_cnn_output), utts))


def cmd_probe(args) -> int:
    from .downstream import ProbeConfig, probe_predict, probe_train, save_probe, write_predictions

    try:
        train_rows = read_manifest(args.manifest, require_label=True)
        eval_rows = read_manifest(args.eval_manifest, require_label=True) if args.eval_manifest else None
    except ManifestError as e:
        if "no label column" in str(e):
            raise UsageError(str(e)) from None
        raise
    model = load_checkpoint(args.checkpoint)
    train_utts = load_corpus(train_rows)
    feats = _extract_all(model, train_utts, args.include_cnn_output, args.jobs)
    examples = [(f, u.label) for f, u in zip(feats, train_utts)]
    n_classes = len({u.label for u in train_utts})
    pcfg = ProbeConfig(n_classes=max(n_classes, 2), conv_layers=args.conv_layers, kernel=args.kernel,
                       hidden=args.hidden, dropout=args.dropout, batch=args.batch, steps=args.steps)
    probe = probe_train(examples, pcfg, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_probe(probe, out / "probe.hrns")

    preds = probe_predict(probe, feats)
    acc = float(np.mean([p == u.label for p, u in zip(preds, train_utts)]))
    write_predictions(out / "predictions_train.csv", [u.utt_id for u in train_utts],
                      [u.label for u in train_utts], preds)
    print(f"train accuracy {acc:.4f} ({len(train_utts)} utterances)")
    if eval_rows is not None:
        eval_utts = load_corpus(eval_rows)
        efeats = _extract_all(model, eval_utts, args.include_cnn_output, args.jobs)
        epreds = probe_predict(probe, efeats)
        eacc = float(np.mean([p == u.label for p, u in zip(epreds, eval_utts)]))
        write_predictions(out / "predictions_eval.csv", [u.utt_id for u in eval_utts],
                          [u.label for u in eval_utts], epreds)
        print(f"eval accuracy {eacc:.4f} ({len(eval_utts)} utterances)")
    return 0


# --------------------------------------------------------------------------
# inspect / report


def _load_model_config(ref: str):
    """``preset:NAME`` or a checkpoint path -> (label, EncoderConfig)."""
    if ref.startswith("preset:"):
        name = ref.split(":", 1)[1]
        if name not in PRESETS:
            raise UsageError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return name, PRESETS[name]
    return ref, load_checkpoint(ref)[1]


def cmd_inspect(args) -> int:
    name, cfg = _load_model_config(args.target)
    n = count_params(cfg)
    print(f"model: {name}")
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    for part, k in param_breakdown(cfg).items():
        print(f"  {part:<14} {k:>13,}")
    line = f"parameters: {n:,} ({n / 1e6:.2f}M)"
    if name in PUBLISHED_PARAMS_M:
        line += f"; published {PUBLISHED_PARAMS_M[name]}M"
    print(line)
    if args.baseline:
        bname, bcfg = _load_model_config(args.baseline)
        nb = count_params(bcfg)
        ds = delta_s(cfg, bcfg)
        line = f"baseline {bname}: {nb:,} ({nb / 1e6:.2f}M); delta_s = 1 - {n:,}/{nb:,} = {ds:.4f}"
        if bname == "H-L" and name in PUBLISHED_DELTA_S:
            line += f"; published {PUBLISHED_DELTA_S[name]:.3f}"
        print(line)
    return 0


def cmd_report(args) -> int:
    from .plotting import plot_curve_comparison, plot_param_counts, plot_training_curves
    from .pretrain import read_report_csv

    workdir = resolve_workdir(args.workdir)
    written: List[Path] = []
    for csv_path in sorted(workdir.glob("iter*/train.csv")):
        rows = read_report_csv(csv_path)
        if rows:
            written.append(plot_training_curves(rows, csv_path.with_suffix(".png"), csv_path.parent.name))
    sup = workdir / "supervision_curves.csv"
    if sup.exists():
        with open(sup) as fh:
            rows = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
        for metric in ("loss", "masked_acc"):
            curves = {tag: [{"step": r["step"], metric: r[f"{metric}_{tag}"]} for r in rows]
                      for tag in ("raw", "pca")}
            written.append(plot_curve_comparison(curves, workdir / f"supervision_{metric}.png", metric))

    names = list(PRESETS)
    ours = [count_params(PRESETS[k]) / 1e6 for k in names]
    published = [PUBLISHED_PARAMS_M.get(k) for k in names]
    with open(workdir / "params.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("model", "params_m", "published_m", "delta_s_vs_hl", "published_delta_s"))
        for k, o, p in zip(names, ours, published):
            ds = delta_s(PRESETS[k], PRESETS["H-L"])
            w.writerow((k, f"{o:.3f}", "" if p is None else p, f"{ds:.4f}", PUBLISHED_DELTA_S.get(k, "")))
    written.append(workdir / "params.csv")
    written.append(plot_param_counts(names, ours, published, workdir / "params.png"))

    summary = workdir / "reports.csv"
    if summary.exists():
        print(summary.read_text().rstrip())
    for p in written:
        print(f"wrote {p}")
    return 0


def cmd_synth_corpus(args) -> int:
    utts = synth_tone_corpus(args.n_utts, args.units, args.unit_seconds, seed=args.seed)
    manifest = write_corpus(utts, args.out)
    total = sum(u.wave.duration for u in utts)
    print(f"{len(utts)} utterances, {total:.1f}s -> {manifest}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="harness", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def seeded(sp):
        sp.add_argument("--seed", type=int, default=0)
        return sp

    def jobs(sp):
        sp.add_argument("--jobs", type=int, default=1, help="parallel per-utterance workers")
        return sp

    sp = jobs(sub.add_parser("features", help="MFCC + delta features per utterance"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    d = MfccConfig()
    sp.add_argument("--window-ms", type=float, default=d.window_ms)
    sp.add_argument("--hop-ms", type=float, default=d.hop_ms)
    sp.add_argument("--n-mels", type=int, default=d.n_mels)
    sp.add_argument("--n-ceps", type=int, default=d.n_ceps)
    sp.add_argument("--delta-window", type=int, default=d.delta_window)
    sp.set_defaults(func=cmd_features)

    sp = seeded(sub.add_parser("targets", help="fit a codebook and write per-utterance labels"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--iter", type=int, required=True)
    sp.add_argument("--teacher", help="checkpoint of the previous iteration (needed for --iter >= 2)")
    sp.add_argument("--k", type=int, default=1000)
    sp.add_argument("--pca", type=int, metavar="D", help="project teacher features to D dims first")
    sp.add_argument("--layer", type=int, default=9, help="teacher layer used at --iter 2")
    sp.add_argument("--sample-fraction", type=float, default=0.3)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_targets)

    for name, helptext, fn in (
        ("pretrain", "run the first iteration of a config", lambda a: cmd_distill(a, first_only=True)),
        ("distill", "run (or resume) the full schedule of a config", cmd_distill),
        ("ablate-pca", "train the last iteration on raw and on PCA-compressed targets", cmd_ablate_pca),
    ):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True)
        sp.add_argument("--workdir", help="defaults to paths.workdir, then $HARNESS_WORKDIR")
        sp.add_argument("--no-plots", action="store_true")
        sp.set_defaults(func=fn)

    sp = jobs(seeded(sub.add_parser("probe", help="train a frozen-encoder classifier probe")))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True, help="labelled training manifest")
    sp.add_argument("--eval-manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int, default=10000)
    sp.add_argument("--batch", type=int, default=4)
    sp.add_argument("--conv-layers", type=int, default=3)
    sp.add_argument("--kernel", type=int, default=5)
    sp.add_argument("--hidden", type=int, default=80)
    sp.add_argument("--dropout", type=float, default=0.4)
    sp.add_argument("--include-cnn-output", action="store_true",
                    help="also average the pre-Transformer features")
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("inspect", help="config, parameter count and compression of a model")
    sp.add_argument("target", help="checkpoint path or preset:NAME")
    sp.add_argument("--baseline", help="checkpoint path or preset:NAME")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("report", help="render figures from the CSV reports of a workdir")
    sp.add_argument("--workdir")
    sp.set_defaults(func=cmd_report)

    sp = seeded(sub.add_parser("synth-corpus", help="write the synthetic two-speaker tone corpus"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-utts", type=int, default=125)
    sp.add_argument("--units", type=int, default=6)
    sp.add_argument("--unit-seconds", type=float, default=0.4)
    sp.set_defaults(func=cmd_synth_corpus)
    return p


RUN_ERRORS = (
    container.ContainerError, ConfigError, DistillError, ExperimentConfigError, ManifestError,
    QuantizerError, TrainingError, OSError, ValueError,
)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return 2
    except RUN_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
