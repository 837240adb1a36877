"""End-to-end runs: DPLTM, the DPSGD baseline, ablations, convergence and transfer.

All run_* functions return a RunResult whose rows follow COLUMNS. Each private
run emits per-epoch rows plus one summary row (epoch == "final"). The
cumulative_epsilon column always includes the selection budget already spent.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import data_io
from .dp_train import DPTrainConfig, TrainHistory, train_dp
from .nn import LabeledBatch, Mask, NetworkParams, accuracy, full_mask, init_network, mask_fraction
from .selection import PrivacyLedger, ScoreConfig, select_public, select_uniform, select_winner
from .tickets import TicketRecord, TicketStore, generate_tickets

log = logging.getLogger(__name__)

COLUMNS = ("run_id", "mode", "dataset", "epsilon_total", "epsilon1", "epsilon2", "delta", "epoch",
           "test_accuracy", "train_loss", "cumulative_epsilon", "winner_fraction", "seed_model",
           "seed_privacy")
MODES = ("dpltm", "dpsgd", "nonprivate", "random_ticket", "transfer")


@dataclass
class DataSpec:
    kind: str = "mnist-sample"  # idx | csv | synthetic | mnist-sample
    path: Optional[str] = None
    name: Optional[str] = None
    label_column: str = "-1"
    n_classes: Optional[int] = None
    header: bool = True
    synthetic_shape: Tuple[int, int, int] = (5000, 784, 10)
    synthetic_seed: int = 0
    split_seed: int = 0
    max_train_rows: Optional[int] = None


@dataclass
class RunConfig:
    data: DataSpec = field(default_factory=DataSpec)
    epsilon: float = 1.0
    delta: float = 1e-5
    split_fraction: float = 0.9
    tickets: int = 12
    ticket_iters: int = 5000
    ticket_batch: int = 400
    epochs: int = 50
    lot: int = 400
    clip: float = 1.0
    lr: float = 0.1
    ticket_lr: float = 0.1
    nu: float = 50.0
    hidden: Tuple[int, ...] = (300, 100)
    prune_rates: Optional[Tuple[float, ...]] = None
    seed_model: int = 0
    seed_privacy: int = 0
    mode: str = "dpltm"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0 < self.split_fraction <= 1:
            raise ValueError("split_fraction must be in (0, 1]")
        if self.mode == "dpltm" and self.split_fraction == 1:
            raise ValueError("dpltm needs a nonzero selection budget (split_fraction < 1)")

    def layer_dims(self, n_features: int, n_classes: int) -> List[int]:
        return [n_features, *self.hidden, n_classes]


DESK_TICKET_ITERS = 300
DESK_LR = 0.03


def desk_config(**overrides) -> RunConfig:
    """Laptop-scale preset.

    At most 10,000 training rows, 300 ticket-training iterations, and a private
    learning rate of 0.03 (the value that maximises the DPSGD baseline at
    eps=1 on this preset; at the accountant's noise levels lr=0.1 lets the
    noise random walk dominate both arms).
    """
    data = overrides.pop("data", DataSpec(max_train_rows=10_000))
    base = dict(ticket_iters=DESK_TICKET_ITERS, lr=DESK_LR)
    base.update(overrides)
    return RunConfig(data=data, **base)


def split_budget(epsilon: float, split_fraction: float) -> Tuple[float, float]:
    """(eps1, eps2) with eps2 ~ split_fraction * eps and eps1 + eps2 == eps exactly.

    The larger share is computed by multiplication and the smaller by
    subtraction; Sterbenz's lemma makes that subtraction exact.
    """
    if split_fraction >= 0.5:
        eps2 = split_fraction * epsilon
        eps1 = epsilon - eps2
    else:
        eps1 = (1.0 - split_fraction) * epsilon
        eps2 = epsilon - eps1
    return eps1, eps2


@dataclass
class RunResult:
    rows: List[Dict]
    history: Optional[TrainHistory] = None
    params: Optional[NetworkParams] = None
    mask: Optional[Mask] = None
    winner: Optional[TicketRecord] = None
    store: Optional[TicketStore] = None
    ledger: Optional[PrivacyLedger] = None
    extra: Dict = field(default_factory=dict)

    @property
    def summary(self) -> Dict:
        return next(r for r in reversed(self.rows) if r["epoch"] == "final")

    @property
    def final_accuracy(self) -> float:
        return self.summary["test_accuracy"]


# --- data --------------------------------------------------------------------

def load_data(spec: DataSpec) -> Tuple[data_io.Dataset, data_io.Dataset]:
    """(train, test) for a data spec, applying the 80/20 split and row cap."""
    test = None
    if spec.kind == "idx":
        root = Path(spec.path)
        name = spec.name or root.name
        ds = data_io.load_idx(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte",
                              name, spec.n_classes)
        if (root / "t10k-images-idx3-ubyte").exists():
            test = data_io.load_idx(root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte",
                                    f"{name}-test", ds.n_classes)
            ds.predefined_split = True
    elif spec.kind == "csv":
        col = int(spec.label_column) if spec.label_column.lstrip("-").isdigit() else spec.label_column
        if spec.n_classes is None:
            raise ValueError("csv datasets need n_classes")
        ds = data_io.load_csv(spec.path, col, spec.n_classes, spec.header, spec.name)
    elif spec.kind == "synthetic":
        n, dim, k = spec.synthetic_shape
        ds = data_io.make_synthetic(n, dim, k, spec.synthetic_seed, name=spec.name or "synthetic")
    elif spec.kind == "mnist-sample":
        images, labels = data_io.mnist_subset_arrays()
        ds = data_io.Dataset("mnist-sample", images.reshape(len(images), -1) / 255.0,
                             labels.astype(np.int64), 10)
    else:
        raise ValueError(f"unknown dataset kind {spec.kind!r}")
    if test is None:
        train, test = data_io.split_80_20(ds, spec.split_seed)
    else:
        train = ds
    if spec.max_train_rows is not None:
        train = data_io.subsample(train, spec.max_train_rows, spec.split_seed)
    return train, test


# --- phases --------------------------------------------------------------------

def build_tickets(cfg: RunConfig, train: data_io.Dataset, test: data_io.Dataset) -> TicketStore:
    dims = cfg.layer_dims(train.n_features, train.n_classes)
    return generate_tickets(train.batch(), test.batch(), dims, cfg.tickets, cfg.ticket_iters,
                            cfg.prune_rates, cfg.ticket_lr, cfg.ticket_batch, cfg.seed_model)


def _train_cfg(cfg: RunConfig, eps2: float, **kw) -> DPTrainConfig:
    return DPTrainConfig(clip=cfg.clip, lot_size=cfg.lot, lr=cfg.lr, epochs=cfg.epochs, eps2=eps2,
                         delta=cfg.delta, **kw)


def _rows(cfg: RunConfig, run_id: str, mode: str, dataset: str, eps_total: float, eps1: float,
          eps2: float, history: TrainHistory, final_acc: float, fraction: float) -> List[Dict]:
    base = dict(run_id=run_id, mode=mode, dataset=dataset, epsilon_total=eps_total, epsilon1=eps1,
                epsilon2=eps2, delta=cfg.delta, winner_fraction=fraction, seed_model=cfg.seed_model,
                seed_privacy=cfg.seed_privacy)
    rows = [dict(base, epoch=r.epoch, test_accuracy=r.test_accuracy, train_loss=r.loss,
                 cumulative_epsilon=eps1 + r.cumulative_epsilon) for r in history.records]
    spent = history.records[-1].cumulative_epsilon if history.records else 0.0
    last_loss = history.records[-1].loss if history.records else float("nan")
    rows.append(dict(base, epoch="final", test_accuracy=final_acc, train_loss=last_loss,
                     cumulative_epsilon=eps1 + spent))
    return [{c: row[c] for c in COLUMNS} for row in rows]


def _train_ticket(cfg: RunConfig, run_id: str, mode: str, dataset: str, mask: Mask, theta0: NetworkParams,
                  train, test, eps_total, eps1, eps2, rng, **train_kw) -> RunResult:
    tcfg = _train_cfg(cfg, eps2, **train_kw)
    params, history = train_dp(mask, theta0, train.batch(), test.batch(), tcfg, rng, epsilon_offset=eps1)
    acc = accuracy(params, mask, test.batch())
    rows = _rows(cfg, run_id, mode, dataset, eps_total, eps1, eps2, history, acc, mask_fraction(mask))
    return RunResult(rows, history, params, mask)


def privacy_streams(seed_privacy: int):
    """Independent (selection, training) generators derived from the privacy seed.

    Kept apart from the model seed so init and ticket generation can be held
    fixed while the privacy noise varies.
    """
    sel, tr = np.random.SeedSequence(seed_privacy).spawn(2)
    return np.random.default_rng(sel), np.random.default_rng(tr)


def _run_id(cfg: RunConfig, mode: str) -> str:
    return f"{mode}-eps{cfg.epsilon:g}-m{cfg.seed_model}-p{cfg.seed_privacy}"


def run_dpltm(cfg: RunConfig, data=None, store: Optional[TicketStore] = None,
              early_stop_eps: Optional[float] = None) -> RunResult:
    """Tickets, private selection under eps1, private training under (eps2, delta)."""
    train, test = data if data is not None else load_data(cfg.data)
    store = store if store is not None else build_tickets(cfg, train, test)
    eps1, _ = split_budget(cfg.epsilon, cfg.split_fraction)
    sel_rng, _ = privacy_streams(cfg.seed_privacy)
    ledger = PrivacyLedger()
    winner = select_winner(store.records, ScoreConfig(cfg.nu, eps1), sel_rng, ledger)
    return train_selected(cfg, store, winner.index, (train, test), ledger, early_stop_eps)


def train_selected(cfg: RunConfig, store: TicketStore, index: int, data=None,
                   ledger: Optional[PrivacyLedger] = None,
                   early_stop_eps: Optional[float] = None) -> RunResult:
    """Phase 3 for an already selected ticket; eps1 is taken as spent."""
    train, test = data if data is not None else load_data(cfg.data)
    eps1, eps2 = split_budget(cfg.epsilon, cfg.split_fraction)
    if ledger is None:
        ledger = PrivacyLedger()
        ledger.charge("selection", eps1)
    winner = store.record(index)
    _, train_rng = privacy_streams(cfg.seed_privacy)
    res = _train_ticket(cfg, _run_id(cfg, "dpltm"), "dpltm", train.name, winner.mask, store.theta0,
                        train, test, cfg.epsilon, ledger.spent("selection"), eps2, train_rng,
                        early_stop_eps=early_stop_eps)
    ledger.charge("training", res.history.records[-1].cumulative_epsilon if res.history.records else 0.0)
    res.winner, res.store, res.ledger = winner, store, ledger
    return res


def run_dpsgd_baseline(cfg: RunConfig, data=None, early_stop_eps: Optional[float] = None,
                       sigma: Optional[float] = None, clip: Optional[float] = None) -> RunResult:
    """Full network, whole budget to training, same training path and accountant."""
    train, test = data if data is not None else load_data(cfg.data)
    theta0 = init_network(cfg.layer_dims(train.n_features, train.n_classes), cfg.seed_model)
    _, rng = privacy_streams(cfg.seed_privacy)
    if clip is not None:
        cfg = replace(cfg, clip=clip)
    return _train_ticket(cfg, _run_id(cfg, "dpsgd"), "dpsgd", train.name, full_mask(theta0), theta0,
                         train, test, cfg.epsilon, 0.0, cfg.epsilon, rng, early_stop_eps=early_stop_eps,
                         sigma=sigma)


def run_nonprivate(cfg: RunConfig, data=None) -> RunResult:
    """Reference arm: full mask, no noise, no clipping, same lots as the private arms."""
    train, test = data if data is not None else load_data(cfg.data)
    theta0 = init_network(cfg.layer_dims(train.n_features, train.n_classes), cfg.seed_model)
    _, rng = privacy_streams(cfg.seed_privacy)
    ncfg = replace(cfg, clip=math.inf)
    return _train_ticket(ncfg, _run_id(cfg, "nonprivate"), "nonprivate", train.name, full_mask(theta0),
                         theta0, train, test, math.inf, 0.0, math.inf, rng, sigma=0.0)


def run_random_ticket(cfg: RunConfig, data=None, store: Optional[TicketStore] = None) -> RunResult:
    """Paired comparison: EM winner vs a uniformly drawn ticket, same seeds and training.

    The uniform draw ignores the data and is charged no privacy. Returns the
    EM run with the random run under extra["random"].
    """
    train, test = data if data is not None else load_data(cfg.data)
    store = store if store is not None else build_tickets(cfg, train, test)
    em = run_dpltm(cfg, (train, test), store)
    eps1, eps2 = split_budget(cfg.epsilon, cfg.split_fraction)
    sel_rng, train_rng = privacy_streams(cfg.seed_privacy)
    pick = select_uniform(store.records, sel_rng)
    rand = _train_ticket(cfg, _run_id(cfg, "random_ticket"), "random_ticket", train.name, pick.mask,
                         store.theta0, train, test, cfg.epsilon, 0.0, eps2, train_rng)
    rand.winner, rand.store = pick, store
    em.rows = em.rows + rand.rows
    em.extra["random"] = rand
    return em


def checkpoint_epoch(history: TrainHistory, eps1: float, checkpoint: float) -> int:
    """Last epoch whose total spend (eps1 + training) stays within `checkpoint`; 0 if none."""
    best = 0
    for r in history.records:
        if eps1 + r.cumulative_epsilon <= checkpoint:
            best = r.epoch
    return best


def run_convergence(cfg: RunConfig, checkpoints: Sequence[float] = (0.3,), data=None,
                    store: Optional[TicketStore] = None) -> RunResult:
    """Per-epoch curves for DPLTM and DPSGD plus one row per (arm, checkpoint).

    Checkpoint rows carry run_id '<arm run_id>-ckpt<c>' and report the
    accuracy at the last epoch that is still within the checkpoint budget.
    """
    train, test = data if data is not None else load_data(cfg.data)
    dpltm = run_dpltm(cfg, (train, test), store)
    dpsgd = run_dpsgd_baseline(cfg, (train, test))
    rows = dpltm.rows + dpsgd.rows
    ckpts = {}
    for arm, res in (("dpltm", dpltm), ("dpsgd", dpsgd)):
        eps1 = res.rows[0]["epsilon1"] if res.rows else 0.0
        base_acc = accuracy(res.store.theta0 if arm == "dpltm" else init_network(
            cfg.layer_dims(train.n_features, train.n_classes), cfg.seed_model), res.mask, test.batch())
        for c in checkpoints:
            e = checkpoint_epoch(res.history, eps1, c)
            rec = res.history.records[e - 1] if e else None
            acc = rec.test_accuracy if rec else base_acc
            spent = eps1 + (rec.cumulative_epsilon if rec else 0.0)
            ckpts[(arm, c)] = (e, acc, spent)
            summary = res.summary
            rows.append(dict(summary, run_id=f"{summary['run_id']}-ckpt{c:g}", epoch=e, test_accuracy=acc,
                             train_loss=rec.loss if rec else float("nan"), cumulative_epsilon=spent))
    out = RunResult(rows, extra={"dpltm": dpltm, "dpsgd": dpsgd, "checkpoints": ckpts})
    return out


def run_transfer(source_store_path, cfg: RunConfig, data=None) -> RunResult:
    """Train privately on the target with a ticket built on public source data.

    Selection happens without privacy (eps1 = 0); the whole budget goes to
    training. When the source architecture does not match the target data,
    the ticket's trunk is reused with fresh input and output layers.
    """
    train, test = data if data is not None else load_data(cfg.data)
    store = data_io.load_ticket_store(source_store_path)
    winner = select_public(store.records)
    dims = store.layer_dims
    if dims[0] == train.n_features and dims[-1] == train.n_classes:
        mask, theta0, projected = winner.mask, store.theta0, False
    else:
        mask, theta0 = data_io.project_ticket(store, winner, train.n_features, train.n_classes,
                                              cfg.seed_model)
        projected = True
    _, rng = privacy_streams(cfg.seed_privacy)
    ledger = PrivacyLedger()
    ledger.charge("selection", 0.0)
    res = _train_ticket(cfg, _run_id(cfg, "transfer"), "transfer", train.name, mask, theta0, train, test,
                        cfg.epsilon, 0.0, cfg.epsilon, rng)
    ledger.charge("training", res.history.records[-1].cumulative_epsilon if res.history.records else 0.0)
    res.winner, res.store, res.ledger = winner, store, ledger
    res.extra.update(projected=projected, theta0=theta0)
    return res


def run_mode(cfg: RunConfig, data=None, store=None) -> RunResult:
    if cfg.mode == "dpltm":
        return run_dpltm(cfg, data, store)
    if cfg.mode == "dpsgd":
        return run_dpsgd_baseline(cfg, data)
    if cfg.mode == "nonprivate":
        return run_nonprivate(cfg, data)
    if cfg.mode == "random_ticket":
        return run_random_ticket(cfg, data, store)
    raise ValueError(f"mode {cfg.mode!r} needs a dedicated entry point")


# --- output --------------------------------------------------------------------

def write_csv(rows: Sequence[Dict], path, append: bool = False):
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=COLUMNS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in COLUMNS})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_csv(path) -> List[Dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0
