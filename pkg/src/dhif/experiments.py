"""Seeded desk-scale comparison of detector variants.

Every (variant, seed) run trains on the same synthetic 200/100 split and
records clean and salt-and-pepper test metrics.  Runs are stored one JSON
file each, keyed by a fingerprint of the study settings, so an interrupted
study resumes where it stopped and stale results are never mixed in.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .synth import SceneSpec, generate_dataset, with_noise
from .train import DTYPES, TrainConfig, evaluate_model, train

VARIANTS = {
    "standard": {"dhif_levels": frozenset()},
    "dhif23": {"dhif_levels": frozenset({2, 3})},
    "dhif1": {"dhif_levels": frozenset({1})},
    "dhif23_sigmoid": {"dhif_levels": frozenset({2, 3}), "nonlinearity": "sigmoid"},
}


@dataclass
class StudyConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    variants: tuple = tuple(VARIANTS)
    n_train: int = 200
    n_test: int = 100
    data_seed: int = 2024
    noise_p: float = 0.02
    noise_seed: int = 99
    scene: SceneSpec = field(default_factory=SceneSpec)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=100, dtype="float32", eval_every=10))

    def fingerprint(self) -> str:
        d = asdict(self)
        d.pop("seeds")
        d.pop("variants")
        d["train"].pop("seed")
        d["train"].pop("dhif_levels")
        d["train"].pop("nonlinearity")
        blob = json.dumps(d, sort_keys=True, default=lambda o: sorted(o) if isinstance(o, frozenset) else str(o))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def study_data(cfg: StudyConfig):
    """``(train, test, noisy test)`` datasets of the study."""
    spec = replace(cfg.scene)
    tr = generate_dataset(cfg.n_train, spec, cfg.data_seed)
    te = generate_dataset(cfg.n_test, spec, cfg.data_seed + 1)
    return tr, te, with_noise(te, cfg.noise_p, cfg.noise_seed)


def run_one(cfg: StudyConfig, variant: str, seed: int, data=None) -> dict:
    tr, te, noisy = data if data is not None else study_data(cfg)
    tcfg = replace(cfg.train, seed=seed, **VARIANTS[variant])
    rep = train(tr, te, tcfg)
    xn, yn = noisy.arrays(DTYPES[tcfg.dtype])
    noisy_rep, _ = evaluate_model(rep.model, xn, yn, tcfg.threshold, tcfg.match_distance)
    return {
        "variant": variant,
        "seed": seed,
        "fingerprint": cfg.fingerprint(),
        "clean": rep.final.summary(),
        "noisy": noisy_rep.summary(),
        "params": rep.n_params,
        "extra_params": rep.extra_params,
        "wall_clock": rep.wall_clock,
        "report_csv": rep.to_csv(),
    }


def run_study(cfg: StudyConfig, out_dir, log=print) -> list:
    """Run (or resume) every variant x seed; returns the list of run records."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fp = cfg.fingerprint()
    data = None
    records = []
    for seed in cfg.seeds:
        for variant in cfg.variants:
            path = out / f"{variant}_seed{seed}.json"
            if path.exists():
                rec = json.loads(path.read_text())
                if rec.get("fingerprint") == fp:
                    records.append(rec)
                    continue
            if data is None:
                data = study_data(cfg)
            rec = run_one(cfg, variant, seed, data)
            path.write_text(json.dumps(rec, indent=1))
            if log is not None:
                log(f"{variant:>15s} seed {seed}: iou {rec['clean']['iou']:.4f} "
                    f"noisy {rec['noisy']['iou']:.4f} ({rec['wall_clock']:.0f} s)")
            records.append(rec)
    return records


def load_study(cfg: StudyConfig, out_dir) -> list | None:
    """Stored records if every run exists with a matching fingerprint, else ``None``."""
    fp = cfg.fingerprint()
    records = []
    for seed in cfg.seeds:
        for variant in cfg.variants:
            path = Path(out_dir) / f"{variant}_seed{seed}.json"
            if not path.exists():
                return None
            rec = json.loads(path.read_text())
            if rec.get("fingerprint") != fp:
                return None
            records.append(rec)
    return records


def by_variant(records: list, key: str = "clean", metric: str = "iou") -> dict:
    """``{variant: {seed: value}}``."""
    out: dict = {}
    for r in records:
        out.setdefault(r["variant"], {})[r["seed"]] = r[key][metric]
    return out


def trend_summary(records: list) -> dict:
    """The comparisons the study exists for."""
    clean = by_variant(records)
    noisy = by_variant(records, "noisy")
    seeds = sorted(clean["standard"])
    wins = sum(clean["dhif23"][s] > clean["standard"][s] for s in seeds)
    med = {v: float(np.median(list(d.values()))) for v, d in clean.items()}
    level1_violations = sum(clean["dhif1"][s] > clean["dhif23"][s] for s in seeds) if "dhif1" in clean else None
    drop = {v: {s: clean[v][s] - noisy[v][s] for s in seeds} for v in clean}
    robust = sum(drop["dhif23"][s] <= drop["standard"][s] for s in seeds)
    wall = sum(r["wall_clock"] for r in records if r["variant"] in ("standard", "dhif23"))
    return {"seeds": seeds, "dhif23_wins": wins, "median_iou": med, "level1_violations": level1_violations,
            "iou_drop": drop, "robust_seeds": robust, "trend_wall_clock": wall}
