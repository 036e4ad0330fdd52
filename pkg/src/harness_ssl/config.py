"""JSON experiment configuration: schema validation, defaults and corpus loading.

Example::

    {
      "seed": 0,
      "paths": {"workdir": "work", "manifests": {"train": "data/manifest.tsv"}},
      "encoder": {"toy": {"num_clusters": 8, "depth": 4, "emb_d": 32, "h_attn": 4}},
      "schedule": [
        {"index": 1, "targets": {"K": 8}, "train": {"steps": 1000}},
        {"index": 2, "targets": {"K": 8, "layer": 3}, "train": {"steps": 1000}},
        {"index": 3, "student": {"depth": 2}, "init": "blocked_average",
         "targets": {"K": 8, "use_pca": true, "d_prime": 16}, "train": {"steps": 600}}
      ],
      "probe": {"steps": 2000},
      "augmentation": {"speed_factors": [0.9, 1.1]}
    }

``encoder`` is one of ``{"preset": name}``, ``{"toy": {...}}`` or
``{"config": {...full EncoderConfig...}}``. An iteration's ``student`` lists
compression axes applied to the experiment encoder. Relative paths resolve
against the config file's directory.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional

import jsonschema
import numpy as np

from .audio import MfccConfig, add_noise_random, load_wav, speed_perturb
from .corpus import Utterance, load_corpus, read_manifest
from .diffcore import AdamHParams
from .distill import DistillError, IterationSpec, Schedule, compress_config
from .downstream import ProbeConfig
from .encoder import PRESETS, EncoderConfig, toy_config
from .pretrain import LossWeights, MaskSpec, TrainConfig
from .quantizer import TargetOptions

WORKDIR_ENV = "HARNESS_WORKDIR"
RESOLVED_NAME = "config.resolved.json"


class ExperimentConfigError(ValueError):
    pass


_num = {"type": "number"}
_int = {"type": "integer"}
_pos_int = {"type": "integer", "minimum": 1}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_ADAM = _obj({k: _num for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "warmup_fraction")})
_TRAIN = _obj({
    "steps": _pos_int, "batch_utterances": _pos_int, "seed": _int, "log_every": _pos_int,
    "checkpoint_every": {"type": "integer", "minimum": 0},
    "mask": _obj({"p_mask": _num, "span_len": _pos_int}),
    "weights": _obj({"w_masked": _num, "w_unmasked": _num}),
    "adam": _ADAM,
}, required=["steps"])
_MFCC = _obj({"window_ms": _num, "hop_ms": _num, "n_mels": _pos_int, "n_ceps": _pos_int,
              "delta_window": _pos_int})
_TARGETS = _obj({
    "K": _pos_int, "use_pca": {"type": "boolean"}, "d_prime": _pos_int, "sample_fraction": _num,
    "layer": _pos_int, "seed": _int, "max_iters": _pos_int, "rel_tol": _num,
    "minibatch": {"type": ["integer", "null"], "minimum": 1}, "mfcc": _MFCC,
})
_AXES = _obj({"depth": _pos_int, "emb_d": _pos_int, "h_attn": _pos_int, "d_ffn": _pos_int})
_ITERATION = _obj({
    "index": _pos_int,
    "student": _AXES,
    "init": {"enum": ["random", "blocked_average"]},
    "init_seed": _int,
    "targets": _TARGETS,
    "train": _TRAIN,
    "data_subset": {"type": "string"},
}, required=["index", "train"])
_PROBE = _obj({
    "conv_layers": _pos_int, "kernel": _pos_int, "hidden": _pos_int, "dropout": _num,
    "batch": _pos_int, "steps": _pos_int, "adam": _ADAM,
})

SCHEMA = _obj({
    "seed": _int,
    "paths": _obj({
        "workdir": {"type": "string"},
        "manifests": {"type": "object", "additionalProperties": {"type": "string"}, "minProperties": 1},
    }, required=["manifests"]),
    "encoder": {
        "oneOf": [
            _obj({"preset": {"enum": sorted(PRESETS)}}, required=["preset"]),
            _obj({"toy": {"type": "object"}}, required=["toy"]),
            _obj({"config": {"type": "object"}}, required=["config"]),
        ]
    },
    "schedule": {"type": "array", "items": _ITERATION, "minItems": 1},
    "probe": _PROBE,
    "augmentation": _obj({
        "speed_factors": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
        "noise": _obj({"path": {"type": "string"}, "snr_db": {"type": "array", "items": _num,
                                                              "minItems": 2, "maxItems": 2}},
                      required=["path"]),
    }),
}, required=["paths", "encoder", "schedule"])


@dataclass
class Augmentation:
    speed_factors: List[float] = field(default_factory=list)
    noise_path: Optional[str] = None
    snr_db: tuple = (5.0, 20.0)


@dataclass
class ExperimentConfig:
    seed: int
    workdir: Optional[Path]
    manifests: Dict[str, Path]
    encoder: EncoderConfig
    schedule: Schedule
    probe: dict
    augmentation: Augmentation

    def resolved(self) -> dict:
        """Fully expanded config, every default explicit."""
        return {
            "seed": self.seed,
            "paths": {"workdir": str(self.workdir) if self.workdir else None,
                      "manifests": {k: str(v) for k, v in sorted(self.manifests.items())}},
            "encoder": self.encoder.to_dict(),
            "schedule": [s.to_dict() for s in self.schedule.iterations],
            "probe": self.probe,
            "augmentation": asdict(self.augmentation),
        }

    def write_resolved(self, workdir) -> Path:
        path = Path(workdir) / RESOLVED_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.resolved(), indent=2, sort_keys=True) + "\n")
        return path


def _encoder(spec: Mapping) -> EncoderConfig:
    if "preset" in spec:
        return PRESETS[spec["preset"]]
    if "toy" in spec:
        return toy_config(**spec["toy"])
    return EncoderConfig.from_dict(spec["config"])


def _iteration(d: Mapping, base: EncoderConfig, seed: int) -> IterationSpec:
    student, _ = compress_config(base, **d.get("student", {}))
    t = dict(d.get("targets", {}))
    t.setdefault("seed", seed)
    if "mfcc" in t:
        t["mfcc"] = MfccConfig(**t["mfcc"])
    tr = dict(d["train"])
    tr.setdefault("seed", seed)
    train = TrainConfig(
        steps=tr.pop("steps"),
        mask=MaskSpec(**tr.pop("mask", {})),
        weights=LossWeights(**tr.pop("weights", {})),
        adam=AdamHParams(**tr.pop("adam", {})),
        **tr,
    )
    return IterationSpec(
        index=d["index"],
        student_config=student,
        init=d.get("init", "random"),
        targets=TargetOptions(**t),
        train=train,
        data_subset=d.get("data_subset", "train"),
        init_seed=d.get("init_seed", seed),
    )


def parse_config(raw: Mapping, base_dir=".", check_paths: bool = True) -> ExperimentConfig:
    """Validate ``raw`` against the schema and build typed configs.

    Every problem is reported here, before any compute starts.
    """
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ExperimentConfigError(f"config error at {where}: {e.message}") from None
    base_dir = Path(base_dir)
    seed = raw.get("seed", 0)

    def resolve(p: str) -> Path:
        return Path(p) if Path(p).is_absolute() else base_dir / p

    manifests = {k: resolve(v) for k, v in raw["paths"]["manifests"].items()}
    if check_paths:
        for k, p in manifests.items():
            if not p.exists():
                raise ExperimentConfigError(f"manifest {k!r} not found: {p}")
    workdir = raw["paths"].get("workdir")
    try:
        encoder = _encoder(raw["encoder"])
        iterations = [_iteration(d, encoder, seed) for d in raw["schedule"]]
        schedule = Schedule(iterations)
        probe = dict(raw.get("probe", {}))
        ProbeConfig.from_dict({"n_classes": 2, **probe})
    except (ValueError, TypeError, DistillError) as e:
        raise ExperimentConfigError(f"config error: {e}") from e
    for s in iterations:
        if s.data_subset not in manifests:
            raise ExperimentConfigError(
                f"iteration {s.index}: data_subset {s.data_subset!r} is not a manifest key {sorted(manifests)}"
            )
        if s.targets.K != s.student_config.num_clusters:
            raise ExperimentConfigError(
                f"iteration {s.index}: targets.K={s.targets.K} but the encoder predicts "
                f"{s.student_config.num_clusters} clusters"
            )
    aug = raw.get("augmentation", {})
    noise = aug.get("noise")
    augmentation = Augmentation(
        speed_factors=list(aug.get("speed_factors", [])),
        noise_path=str(resolve(noise["path"])) if noise else None,
        snr_db=tuple(noise.get("snr_db", (5.0, 20.0))) if noise else (5.0, 20.0),
    )
    if check_paths and augmentation.noise_path and not Path(augmentation.noise_path).exists():
        raise ExperimentConfigError(f"noise file not found: {augmentation.noise_path}")
    return ExperimentConfig(seed, resolve(workdir) if workdir else None, manifests, encoder,
                            schedule, probe, augmentation)


def load_config(path, check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ExperimentConfigError(f"{path}: invalid JSON: {e}") from None
    return parse_config(raw, path.parent, check_paths)


def resolve_workdir(flag: Optional[str], cfg: Optional[ExperimentConfig] = None) -> Path:
    """``--workdir`` flag, then the config's path, then ``$HARNESS_WORKDIR``."""
    if flag:
        return Path(flag)
    if cfg is not None and cfg.workdir is not None:
        return cfg.workdir
    env = os.environ.get(WORKDIR_ENV)
    if env:
        return Path(env)
    raise ExperimentConfigError(f"no workdir: pass --workdir, set paths.workdir or ${WORKDIR_ENV}")


def augment(utts: List[Utterance], aug: Augmentation, seed: int) -> List[Utterance]:
    """Originals plus one speed-perturbed copy per factor; optional noise on the copies and originals."""
    out = list(utts)
    for f in aug.speed_factors:
        if f == 1.0:
            continue
        out.extend(Utterance(f"{u.utt_id}_sp{f:g}", speed_perturb(u.wave, f), u.label) for u in utts)
    out.sort(key=lambda u: u.utt_id)
    if aug.noise_path:
        noise = load_wav(aug.noise_path)
        rng = np.random.default_rng(seed)
        out = [Utterance(u.utt_id, add_noise_random(u.wave, noise, rng, aug.snr_db), u.label) for u in out]
    return out


def load_corpora(cfg: ExperimentConfig) -> Dict[str, List[Utterance]]:
    return {name: augment(load_corpus(read_manifest(p)), cfg.augmentation, cfg.seed)
            for name, p in sorted(cfg.manifests.items())}
