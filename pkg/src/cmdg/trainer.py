"""Training loops for ERM, match-regularized ERM and two-phase MatchDG.

All classification modes share one loop (:func:`_fit_matched`).  A batch is
``batch_rows`` rows of a match matrix, flattened over the domain columns,
plus ``batch_rows`` samples drawn uniformly from the whole training split
that only receive the cross-entropy term.  Modes differ only in which match
matrices feed the penalty:

=============  ==========================================
erm            random matches, lambda = 0
randmatch      random matches
perfmatch      perfect (object) matches
matchdg        matches inferred by the contrastive phase
mdghybrid      inferred matches and perfect matches
fraction       perfect rows w.p. ``fraction``, else random
=============  ==========================================
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import matchstore
from .datagen import MultiDomainDataset
from .losses import ContrastiveConfig, contrastive_loss, match_penalty, matched_erm_loss
from .matchstore import MatchMatrix
from .metrics import pooled_accuracy, representations, top10_overlap
from .netcore import DenseNet, NonFiniteError, OptimizerState, backward, forward, init_dense_net, sgd_step

logger = logging.getLogger(__name__)

MODES = ("erm", "randmatch", "perfmatch", "matchdg_phase1", "matchdg_phase2", "mdghybrid", "fraction")
REQUIRED_STRATEGY = {"randmatch": ("random",), "perfmatch": ("perfect",), "matchdg_phase2": ("inferred",)}


@dataclass
class TrainConfig:
    mode: str = "erm"
    epochs: int = 30
    batch_rows: int = 16
    lam: float = 1.0
    lam_oracle: float = 1.0
    tau: float = 0.05
    refresh_period: int = 5
    fraction: float = 0.0
    seed: int = 0
    early_stop_metric: str | None = "val_accuracy"
    patience: int | None = None
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    momentum: float = 0.9
    hidden: tuple[int, ...] = (64, 64)
    repr_dim: int = 32  # contrastive-phase output width
    random_part: bool = True
    bottleneck: int | None = None  # width of a linear representation layer
    standardize: bool = True  # fixed input scaling from training-set statistics

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.refresh_period < 1:
            raise ValueError("refresh_period must be >= 1")
        if self.batch_rows < 1:
            raise ValueError("batch_rows must be >= 1")
        if self.lam < 0 or self.lam_oracle < 0:
            raise ValueError("match penalty weights must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.early_stop_metric not in (None, "val_accuracy", "top10_overlap"):
            raise ValueError(f"unknown early_stop_metric {self.early_stop_metric!r}")
        if not self.hidden:
            raise ValueError("need at least one hidden layer")

    def optimizer(self) -> OptimizerState:
        return OptimizerState(self.learning_rate, self.weight_decay, self.momentum)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    penalty: float
    train_acc: float | None
    val_acc: float | None
    top10: float | None = None


@dataclass
class TrainReport:
    mode: str
    config: dict
    history: list[EpochRecord] = field(default_factory=list)
    initial_penalty: float | None = None
    best_epoch: int | None = None
    stopped_epoch: int | None = None
    net: DenseNet | None = None
    matches: MatchMatrix | None = None
    wall_clock: float = 0.0

    def to_dict(self, include_params: bool = False, include_timing: bool = False) -> dict:
        out = {
            "mode": self.mode,
            "config": self.config,
            "initial_penalty": self.initial_penalty,
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
            "history": [asdict(h) for h in self.history],
        }
        if self.matches is not None:
            out["matches_strategy"] = self.matches.strategy
        if include_params and self.net is not None:
            out["params"] = self.net.state_dict()
        if include_timing:
            out["wall_clock"] = self.wall_clock
        return out

    def trace_rows(self) -> list[tuple]:
        """``(epoch, loss, penalty, train_acc, val_acc)`` per epoch."""
        return [(h.epoch, h.loss, h.penalty, h.train_acc, h.val_acc) for h in self.history]


@dataclass
class Phase1Result:
    net: DenseNet
    matches: MatchMatrix
    report: TrainReport


# ---------------------------------------------------------------- helpers


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    return np.random.default_rng([seed, 0]), np.random.default_rng([seed, 1])


def classifier_net(ds: MultiDomainDataset, cfg: TrainConfig, rng: np.random.Generator) -> DenseNet:
    if cfg.bottleneck is None:
        sizes = [ds.input_dim, *cfg.hidden, ds.num_classes]
        return _scaled(init_dense_net(sizes, ds.num_classes, rng), ds, cfg)
    # Linear representation layer between the ReLU stack and the classifier.
    sizes = [ds.input_dim, *cfg.hidden, cfg.bottleneck, ds.num_classes]
    net = init_dense_net(sizes, ds.num_classes, rng, repr_layer_index=len(sizes) - 3)
    net.layers[net.repr_layer_index].activation = "identity"
    return _scaled(net, ds, cfg)


def contrastive_net(ds: MultiDomainDataset, cfg: TrainConfig, rng: np.random.Generator) -> DenseNet:
    sizes = [ds.input_dim, *cfg.hidden, cfg.repr_dim]
    net = init_dense_net(sizes, ds.num_classes, rng, repr_layer_index=len(sizes) - 2)
    return _scaled(net, ds, cfg)


def _scaled(net: DenseNet, ds: MultiDomainDataset, cfg: TrainConfig) -> DenseNet:
    if cfg.standardize:
        net.set_input_scaling(ds.flat()[0])
    return net


def _global_rows(mm: MatchMatrix, offsets: np.ndarray, rows: np.ndarray) -> np.ndarray:
    return mm.entries[rows] + offsets[:-1][None, :]


def dataset_penalty(ds: MultiDomainDataset, reprs: list[np.ndarray], mm: MatchMatrix) -> float:
    """Mean squared distance over every (anchor, matched) pair of a matrix."""
    flat = np.concatenate(reprs)
    rows = _global_rows(mm, ds.offsets(), np.arange(mm.num_rows))
    return match_penalty(flat, rows, mm.base_domain)[0]


def _check_compatible(mms: list[MatchMatrix]) -> None:
    ref = mms[0]
    for mm in mms[1:]:
        if not (np.array_equal(mm.base_domain, ref.base_domain) and np.array_equal(mm.anchors(), ref.anchors())):
            raise ValueError("match matrices must share anchors row-for-row")


class _BestTracker:
    """Keeps the best-scoring checkpoint; ties keep the earlier epoch."""

    def __init__(self, patience: int | None):
        self.best: float | None = None
        self.epoch: int | None = None
        self.net: DenseNet | None = None
        self.patience = patience
        self.since = 0

    def update(self, score: float | None, epoch: int, net: DenseNet) -> bool:
        """Record ``score``; return True when patience is exhausted."""
        if score is None:
            return False
        if self.best is None or score > self.best:
            self.best, self.epoch, self.net = score, epoch, net.copy()
            self.since = 0
        else:
            self.since += 1
        return self.patience is not None and self.since >= self.patience


# ------------------------------------------------------- classification loop


def _fit_matched(
    train: MultiDomainDataset,
    val: MultiDomainDataset | None,
    sources: list[tuple[MatchMatrix, float]],
    cfg: TrainConfig,
    mode: str,
) -> TrainReport:
    start = time.perf_counter()
    _check_compatible([m for m, _ in sources])
    # A zero-weight source adds nothing; drop it unless it is the only one.
    active = [(m, lam) for m, lam in sources if lam > 0] or [sources[0]]

    init_rng, batch_rng = _rngs(cfg.seed)
    net = classifier_net(train, cfg, init_rng)
    opt = cfg.optimizer()
    x_all, y_all, _ = train.flat()
    offsets = train.offsets()
    n_total = len(y_all)
    n_rows = active[0][0].num_rows

    diag = matchstore.perfect_matches(train) if train.has_objects() else active[0][0]
    report = TrainReport(mode=mode, config=cfg.to_dict())
    report.initial_penalty = dataset_penalty(train, representations(net, train), diag)
    track = _BestTracker(cfg.patience)
    use_val = cfg.early_stop_metric == "val_accuracy" and val is not None and sum(val.sizes()) > 0

    for epoch in range(1, cfg.epochs + 1):
        perm = batch_rng.permutation(n_rows)
        losses = []
        for s in range(0, n_rows, cfg.batch_rows):
            rows = perm[s : s + cfg.batch_rows]
            parts, terms = [], []
            pos = 0
            for mm, lam in active:
                g = _global_rows(mm, offsets, rows)
                parts.append(g.ravel())
                local = pos + np.arange(g.size).reshape(g.shape)
                terms.append((local, mm.base_domain[rows], lam))
                pos += g.size
            if cfg.random_part:
                parts.append(batch_rng.choice(n_total, size=min(len(rows), n_total), replace=False))
            idx = np.concatenate(parts)
            loss, grads = matched_erm_loss(net, x_all[idx], y_all[idx], terms)
            if not np.isfinite(loss.total):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}")
            sgd_step(net, grads, opt)
            losses.append(loss.total)

        reprs = representations(net, train)
        rec = EpochRecord(
            epoch=epoch,
            loss=float(np.mean(losses)),
            penalty=dataset_penalty(train, reprs, diag),
            train_acc=pooled_accuracy(net, train),
            val_acc=pooled_accuracy(net, val) if val is not None and sum(val.sizes()) else None,
        )
        report.history.append(rec)
        if use_val and track.update(rec.val_acc, epoch, net):
            break

    report.stopped_epoch = report.history[-1].epoch
    if use_val and track.net is not None:
        report.best_epoch, report.net = track.epoch, track.net
    else:
        report.best_epoch, report.net = report.stopped_epoch, net
    report.matches = active[0][0]
    report.wall_clock = time.perf_counter() - start
    return report


def train_matched(
    train: MultiDomainDataset,
    matches: MatchMatrix,
    cfg: TrainConfig,
    val: MultiDomainDataset | None = None,
) -> TrainReport:
    """Cross-entropy plus ``cfg.lam`` times the match penalty over ``matches``."""
    allowed = REQUIRED_STRATEGY.get(cfg.mode)
    if allowed and matches.strategy not in allowed:
        raise ValueError(f"mode {cfg.mode!r} needs {allowed} matches, got {matches.strategy!r}")
    matches.validate(train)
    return _fit_matched(train, val, [(matches, cfg.lam)], cfg, cfg.mode)


def train_erm(train: MultiDomainDataset, cfg: TrainConfig, val: MultiDomainDataset | None = None) -> TrainReport:
    """Plain cross-entropy; batches come from a random match matrix so domains stay balanced."""
    matches = matchstore.random_matches(train, cfg.seed)
    return _fit_matched(train, val, [(matches, 0.0)], replace(cfg, lam=0.0), "erm")


def train_randmatch(train, cfg, val=None) -> TrainReport:
    return _fit_matched(train, val, [(matchstore.random_matches(train, cfg.seed), cfg.lam)], cfg, "randmatch")


def train_perfmatch(train, cfg, val=None) -> TrainReport:
    return _fit_matched(train, val, [(matchstore.perfect_matches(train), cfg.lam)], cfg, "perfmatch")


def fraction_match_experiment(train, fraction: float, cfg: TrainConfig, val=None) -> TrainReport:
    """Matched training where each row is perfect with probability ``fraction``."""
    mm = matchstore.fraction_matches(train, fraction, cfg.seed)
    return _fit_matched(train, val, [(mm, cfg.lam)], cfg, f"fraction_{fraction:g}")


# ------------------------------------------------------------ contrastive phase


def train_matchdg_phase1(
    train: MultiDomainDataset,
    cfg: TrainConfig,
    val: MultiDomainDataset | None = None,
    initial_matches: MatchMatrix | None = None,
) -> Phase1Result:
    """Contrastive representation learning with periodically re-inferred matches.

    Starts from random class matches (or ``initial_matches``); every ``refresh_period`` epochs the
    matches are replaced by nearest same-class neighbours under the current
    representation.  When ``early_stop_metric == "top10_overlap"`` and the
    validation split has object ids, the checkpoint with the best validation
    top-10 overlap is kept.  The returned matches are inferred from the final
    (kept) representation.
    """
    if train.num_domains < 2 or train.num_classes < 2:
        raise ValueError("contrastive phase needs >= 2 domains and >= 2 classes")
    start = time.perf_counter()
    init_rng, batch_rng = _rngs(cfg.seed)
    net = contrastive_net(train, cfg, init_rng)
    opt = cfg.optimizer()
    x_all, y_all, dom_all = train.flat()
    offsets = train.offsets()
    ccfg = ContrastiveConfig(cfg.tau)
    matches = initial_matches if initial_matches is not None else matchstore.random_matches(train, cfg.seed)
    matches.validate(train)
    diag = matchstore.perfect_matches(train) if train.has_objects() else None

    val_perfect = None
    if cfg.early_stop_metric == "top10_overlap" and val is not None and sum(val.sizes()) and val.has_objects():
        val_perfect = matchstore.perfect_matches(val)
    track = _BestTracker(cfg.patience)

    report = TrainReport(mode="matchdg_phase1", config=cfg.to_dict())
    report.initial_penalty = dataset_penalty(train, representations(net, train), diag) if diag else None
    skipped = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = batch_rng.permutation(matches.num_rows)
        losses = []
        for s in range(0, matches.num_rows, cfg.batch_rows):
            rows = perm[s : s + cfg.batch_rows]
            g = _global_rows(matches, offsets, rows)
            idx = g.ravel()
            local = np.arange(g.size).reshape(g.shape)
            reprs, _ = forward(net, x_all[idx])
            try:
                loss, d_repr = contrastive_loss(reprs, y_all[idx], dom_all[idx], local, ccfg)
            except ValueError:
                skipped += 1
                continue
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite contrastive loss at epoch {epoch}")
            sgd_step(net, backward(net, d_repr=d_repr), opt)
            losses.append(loss)

        updated = matchstore.refresh(train, lambda d: representations(net, d), cfg.refresh_period, epoch)
        if updated is not None:
            matches = updated
        reprs_tr = representations(net, train)
        top10 = None
        if val_perfect is not None:
            top10 = top10_overlap(val, representations(net, val), val_perfect)
        report.history.append(
            EpochRecord(
                epoch=epoch,
                loss=float(np.mean(losses)) if losses else float("nan"),
                penalty=dataset_penalty(train, reprs_tr, diag) if diag else 0.0,
                train_acc=None,
                val_acc=None,
                top10=top10,
            )
        )
        if track.update(top10, epoch, net):
            break
    if skipped:
        logger.info("phase 1: %d batches without a usable positive/negative pair were skipped", skipped)

    report.stopped_epoch = report.history[-1].epoch
    if track.net is not None:
        report.best_epoch, net = track.epoch, track.net
    else:
        report.best_epoch = report.stopped_epoch
    final = matchstore.infer_matches(train, representations(net, train))
    report.net, report.matches = net, final
    report.wall_clock = time.perf_counter() - start
    return Phase1Result(net, final, report)


def train_matchdg_phase2(
    train: MultiDomainDataset,
    phase1: Phase1Result | MatchMatrix,
    cfg: TrainConfig,
    val: MultiDomainDataset | None = None,
) -> TrainReport:
    """Fresh classifier regularized by the phase-1 matches."""
    mm = phase1.matches if isinstance(phase1, Phase1Result) else phase1
    return _fit_matched(train, val, [(mm, cfg.lam)], cfg, "matchdg_phase2")


def train_mdghybrid(
    train: MultiDomainDataset,
    phase1: Phase1Result | MatchMatrix,
    oracle: MatchMatrix,
    cfg: TrainConfig,
    val: MultiDomainDataset | None = None,
) -> TrainReport:
    """Cross-entropy + ``lam`` * penalty(inferred) + ``lam_oracle`` * penalty(oracle).

    Both matrices contribute their row samples to the batch.  A source with
    zero weight is dropped, so ``lam_oracle=0`` reproduces phase 2 and
    ``lam=0`` reproduces perfect-match training.
    """
    mm = phase1.matches if isinstance(phase1, Phase1Result) else phase1
    return _fit_matched(train, val, [(mm, cfg.lam), (oracle, cfg.lam_oracle)], cfg, "mdghybrid")
