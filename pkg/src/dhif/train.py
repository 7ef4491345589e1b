"""Training loop, evaluation helpers, report serialisation and the ablation grid."""
from __future__ import annotations

import csv
import itertools
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DivergedError
from .layer import FilterBank, dump_filter_bank
from .metrics import MetricsReport, evaluate, threshold
from .net import AdamState, MiniDetector, NetConfig, adam_step
from .nn import soft_iou_loss
from .storage import save_checkpoint
from .tensor import SeededRng, derive_seeds

REPORT_COLUMNS = ("epoch", "loss", "iou", "niou", "pd", "fa")
DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 5e-4
    lr_decay: float = 0.5
    decay_every: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    levels: int = 3
    channels: tuple = (8, 16, 32)
    dhif_levels: frozenset = frozenset({2, 3})
    kernel_size: int = 3
    nonlinearity: str = "tanh"
    block_order: str = "dhif_first"
    dtype: str = "float64"
    eval_every: int = 1
    threshold: float = 0.5
    match_distance: float = 3.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.dhif_levels = frozenset(int(l) for l in self.dhif_levels)

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
        self.net_config()

    def net_config(self) -> NetConfig:
        return NetConfig(levels=self.levels, channels=self.channels, dhif_levels=self.dhif_levels,
                         kernel_size=self.kernel_size, nonlinearity=self.nonlinearity,
                         block_order=self.block_order)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for the 0-based training epoch ``epoch``."""
        return self.learning_rate * self.lr_decay ** (epoch // self.decay_every)


@dataclass
class EpochRow:
    epoch: int
    loss: float
    iou: float = float("nan")
    niou: float = float("nan")
    pd: float = float("nan")
    fa: float = float("nan")


@dataclass
class TrainingReport:
    rows: list = field(default_factory=list)
    final: MetricsReport | None = None
    n_params: int = 0
    extra_params: int = 0
    wall_clock: float = 0.0
    model: MiniDetector | None = None

    def to_csv(self) -> str:
        lines = [",".join(REPORT_COLUMNS)]
        for r in self.rows:
            vals = [r.loss, r.iou, r.niou, r.pd, r.fa]
            lines.append(",".join([str(r.epoch)] + ["" if np.isnan(v) else repr(float(v)) for v in vals]))
        f = self.final
        lines.append(f"# summary final_iou={f.iou!r} final_niou={f.niou!r} final_pd={f.pd!r} "
                     f"final_fa={f.fa!r} params={self.n_params} extra_params={self.extra_params}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        """CSV report; wall-clock goes to a sibling ``.time`` file so the CSV stays reproducible."""
        path = Path(path)
        path.write_text(self.to_csv())
        path.with_suffix(".time").write_text(f"wall_clock_seconds = {self.wall_clock:.3f}\n")


def read_report(path) -> list:
    """Parse the per-epoch rows of a report CSV back into :class:`EpochRow` objects."""
    rows = []
    with open(Path(path)) as fh:
        for rec in csv.DictReader(line for line in fh if not line.startswith("#")):
            vals = {k: (float(v) if v else float("nan")) for k, v in rec.items() if k != "epoch"}
            rows.append(EpochRow(int(rec["epoch"]), **vals))
    return rows


def shuffle(n: int, rng: SeededRng) -> np.ndarray:
    """Fisher-Yates permutation driven by the portable generator."""
    idx = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.integers(0, i)
        idx[i], idx[j] = idx[j], idx[i]
    return np.array(idx)


def predict(net: MiniDetector, images: np.ndarray, batch: int = 50) -> np.ndarray:
    """Eval-mode probability maps for an ``N x C x H x W`` stack."""
    out = []
    for s in range(0, len(images), batch):
        prob, _ = net.forward(images[s : s + batch], training=False)
        out.append(prob)
    return np.concatenate(out)


def evaluate_model(net: MiniDetector, images: np.ndarray, masks: np.ndarray, t: float = 0.5,
                   match_distance: float = 3.0) -> tuple[MetricsReport, float]:
    """``(metrics, mean soft-IoU loss)`` of ``net`` on a labelled stack."""
    prob = predict(net, images)
    loss, _ = soft_iou_loss(prob, masks.astype(prob.dtype))
    return evaluate([threshold(p, t) for p in prob], masks, match_distance), float(loss)


def _as_arrays(data, dtype):
    if hasattr(data, "arrays"):
        return data.arrays(dtype)
    x, y = data
    return np.asarray(x, dtype=dtype), np.asarray(y, dtype=dtype)


def train(train_set, test_set, cfg: TrainConfig, log=None) -> TrainingReport:
    """Train a fresh detector; ``train_set``/``test_set`` are datasets or ``(images, masks)``.

    Row 0 of the report is the untrained model; row ``e`` follows training
    epoch ``e``.  Metrics are filled every ``cfg.eval_every`` epochs and on
    the last one.
    """
    cfg.validate()
    dtype = DTYPES[cfg.dtype]
    xtr, ytr = _as_arrays(train_set, dtype)
    xte, yte = _as_arrays(test_set, dtype)
    if len(xtr) == 0 or len(xte) == 0:
        raise ValueError("training and test sets must be non-empty")
    start = time.perf_counter()
    init_seed, shuffle_seed = derive_seeds(cfg.seed, 2)
    net = MiniDetector(cfg.net_config(), seed=init_seed, dtype=dtype)
    order_rng = SeededRng(shuffle_seed)
    state = AdamState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    params = net.params()

    rep, _ = evaluate_model(net, xte, yte, cfg.threshold, cfg.match_distance)
    _, init_loss = evaluate_model(net, xtr, ytr, cfg.threshold, cfg.match_distance)
    rows = [EpochRow(0, init_loss, **rep.summary())]
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        perm = shuffle(len(xtr), order_rng)
        total, count = 0.0, 0
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            prob, tape = net.forward(xtr[idx], training=True)
            loss, grad = soft_iou_loss(prob, ytr[idx])
            if not np.isfinite(loss):
                raise DivergedError(epoch + 1)
            _, grads = net.backward(grad, tape)
            adam_step(params, grads, state, lr)
            total += float(loss) * len(idx)
            count += len(idx)
        row = EpochRow(epoch + 1, total / count)
        if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs:
            rep, _ = evaluate_model(net, xte, yte, cfg.threshold, cfg.match_distance)
            for k, v in rep.summary().items():
                setattr(row, k, v)
        rows.append(row)
        if log is not None:
            log(row)
    return TrainingReport(rows, rep, net.n_params(), net.extra_params(),
                          time.perf_counter() - start, net)


def filter_banks(net: MiniDetector, image: np.ndarray) -> list:
    """``(layer name, FilterBank)`` for every DHiF layer on one ``C x H x W`` image."""
    _, tape = net.forward(np.asarray(image)[None], training=False)
    out = []
    names = {id(p): name for name, p in net.dhif_layers()}
    for lvl, block in enumerate(net.enc):
        bt = tape["enc"][lvl]
        for slot, key in (("conv1", "c1"), ("conv2", "c2")):
            p = getattr(block, slot)
            if id(p) in names:
                dt = bt[key]
                ho, wo = dt["out_hw"]
                bank = dt["bank"][0]
                out.append((names[id(p)], FilterBank(np.asarray(bank, dtype=np.float64).reshape(ho, wo, *bank.shape[1:]))))
    return out


def save_run(report: TrainingReport, cfg: TrainConfig, out_dir, sample_image=None) -> dict:
    """Write ``report.csv``, ``checkpoint.txt`` and one filter-bank dump per DHiF layer."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.csv")
    net = report.model
    tensors = dict(net.params())
    tensors.update(net.buffers())
    meta = {"levels": cfg.levels, "channels": ",".join(map(str, cfg.channels)),
            "dhif_levels": ",".join(map(str, sorted(cfg.dhif_levels))),
            "kernel_size": cfg.kernel_size, "nonlinearity": cfg.nonlinearity,
            "block_order": cfg.block_order, "dtype": cfg.dtype}
    save_checkpoint(out / "checkpoint.txt", tensors, meta)
    written = {"report": out / "report.csv", "checkpoint": out / "checkpoint.txt", "banks": []}
    if sample_image is not None:
        for name, bank in filter_banks(net, sample_image):
            path = out / f"bank_{name}.txt"
            dump_filter_bank(bank, path)
            written["banks"].append(path)
    return written


def model_from_checkpoint(tensors: dict, meta: dict) -> MiniDetector:
    levels = [int(v) for v in meta["dhif_levels"].split(",") if v]
    cfg = NetConfig(levels=int(meta["levels"]), channels=tuple(int(c) for c in meta["channels"].split(",")),
                    dhif_levels=frozenset(levels), kernel_size=int(meta["kernel_size"]),
                    nonlinearity=meta["nonlinearity"], block_order=meta["block_order"])
    net = MiniDetector(cfg, dtype=DTYPES[meta.get("dtype", "float64")])
    names = set(net.params())
    net.load({k: v for k, v in tensors.items() if k in names},
             {k: v for k, v in tensors.items() if k not in names})
    return net


ABLATION_AXES = {
    "dhif_levels": [frozenset(), frozenset({1}), frozenset({2}), frozenset({3})],
    "kernel_size": [3, 5, 7],
    "nonlinearity": ["tanh", "none", "sigmoid", "leaky_relu"],
    "block_order": ["dhif_first", "dhif_second"],
}


def ablation_grid(axes: dict | None = None) -> list:
    """Configurations from the product of the grid axes.

    Without any DHiF level the kernel size is the only axis that still
    changes the network, so nonlinearity and block order collapse to their
    first value there.
    """
    axes = ABLATION_AXES if axes is None else axes
    names = list(axes)
    seen, out = set(), []
    for combo in itertools.product(*(axes[n] for n in names)):
        cfg = dict(zip(names, combo))
        if not cfg.get("dhif_levels", frozenset({1})):
            for n in ("nonlinearity", "block_order"):
                if n in cfg:
                    cfg[n] = axes[n][0]
        key = tuple(sorted((k, tuple(sorted(v)) if isinstance(v, frozenset) else v) for k, v in cfg.items()))
        if key not in seen:
            seen.add(key)
            out.append(cfg)
    return out


def measure_throughput(net: MiniDetector, shape: tuple, repeats: int = 3) -> float:
    """Eval-mode images per second on a zero batch of ``shape`` (best of ``repeats``)."""
    x = np.zeros(shape, dtype=net.dtype)
    net.forward(x, training=False)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        net.forward(x, training=False)
        best = min(best, time.perf_counter() - t0)
    return shape[0] / best


ABLATION_HEADER = ("dhif_levels", "kernel_size", "nonlinearity", "block_order", "iou", "niou", "pd",
                   "fa", "params", "extra_params", "images_per_sec")


def ablation_suite(base_cfg: TrainConfig, train_set, test_set, axes: dict | None = None,
                   out_csv=None) -> list:
    """Train one model per grid point; returns rows of :data:`ABLATION_HEADER` values."""
    rows = []
    for point in ablation_grid(axes):
        cfg = replace(base_cfg, **point)
        rep = train(train_set, test_set, cfg)
        xte, _ = _as_arrays(test_set, DTYPES[cfg.dtype])
        ips = measure_throughput(rep.model, (min(len(xte), 16),) + xte.shape[1:])
        s = rep.final.summary()
        rows.append(("".join(map(str, sorted(cfg.dhif_levels))) or "none", cfg.kernel_size,
                     cfg.nonlinearity, cfg.block_order, s["iou"], s["niou"], s["pd"], s["fa"],
                     rep.n_params, rep.extra_params, ips))
    if out_csv is not None:
        with open(Path(out_csv), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ABLATION_HEADER)
            w.writerows(rows)
    return rows
