"""Adam training loops for the triplet embedder and the auto-tagger baseline."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from .corpus import Corpus, Split, binarize_tags
from .losses import bce_loss, triplet_loss
from .mining import TripletSet
from .network import ModelConfig, Network

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.5
    learning_rate: float = 1e-3
    batch_triplets: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    patience: int = 5
    max_epochs: int = 30
    batches_per_epoch: int | None = None  # None: one pass over all groups / tracks
    val_batches: int = 32
    binarize_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_triplets < 1 or self.patience < 1 or self.max_epochs < 1 or self.val_batches < 1:
            raise ValueError("batch_triplets, patience, max_epochs and val_batches must be positive")
        if self.batches_per_epoch is not None and self.batches_per_epoch < 1:
            raise ValueError("batches_per_epoch must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()})


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0

    def to_dict(self):
        return asdict(self)

    @property
    def best_val_loss(self) -> float:
        return min(self.val_loss) if self.val_loss else math.inf


def adam_step(params, grads, state: OptimizerState, cfg: TrainConfig):
    """One bias-corrected Adam update; returns new (params, state)."""
    if set(params) != set(grads):
        raise ValueError("gradients and parameters name different arrays")
    step = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_params, m, v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, expected {p.shape}")
        m[k] = b1 * state.m[k] + (1 - b1) * g
        v[k] = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m[k] / (1 - b1 ** step)
        v_hat = v[k] / (1 - b2 ** step)
        new_params[k] = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    return new_params, OptimizerState(m, v, step)


class EarlyStopping:
    """Track the best validation loss and decide when to stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.best_params = None
        self.epoch = 0

    def update(self, val_loss: float, params) -> bool:
        """Record one epoch; returns True once ``patience`` epochs pass without improvement."""
        self.epoch += 1
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = self.epoch
            self.best_params = {k: v.copy() for k, v in params.items()}
        return self.epoch - self.best_epoch >= self.patience


@dataclass
class Minibatch:
    anchor: int
    positive: int
    negatives: np.ndarray
    patches: np.ndarray  # anchor, positive, then one per negative

    def __len__(self):
        return len(self.negatives)


def _sub_seed(*keys) -> int:
    return int(np.random.default_rng([int(k) & (2**64 - 1) for k in keys]).integers(2**63))


def build_minibatch(triplets: TripletSet | list, corpus: Corpus, batch_triplets: int, seed: int,
                    group: int | None = None) -> Minibatch:
    """One anchor, one positive and ``batch_triplets`` of the pair's negatives.

    ``group`` selects the anchor-positive pair; when omitted it is drawn from
    ``seed``. Anchor and positive contribute one patch each, shared by every
    triplet of the batch; each negative gets its own freshly sampled patch.
    """
    groups = triplets.groups() if isinstance(triplets, TripletSet) else triplets
    if not groups:
        raise ValueError("no triplet groups to draw a batch from")
    rng = np.random.default_rng([int(seed) & (2**64 - 1)])
    if group is None:
        group = int(rng.integers(len(groups)))
    anchor, positive, negatives = groups[group]
    if len(negatives) < batch_triplets:
        warnings.warn(f"group ({anchor}, {positive}) has {len(negatives)} negatives, "
                      f"fewer than the batch size {batch_triplets}", stacklevel=2)
        chosen = np.asarray(negatives)
    else:
        chosen = np.asarray(negatives)[np.sort(rng.choice(len(negatives), batch_triplets, replace=False))]
    patch_seed = int(rng.integers(2**63))
    ids = [anchor, positive, *chosen.tolist()]
    patches = np.concatenate([corpus.patches(t, 1, patch_seed) for t in ids])
    return Minibatch(int(anchor), int(positive), chosen, patches)


def triplet_batch_loss(net: Network, batch: Minibatch, margin: float, with_grad: bool = True):
    """Mean hinge loss over the batch and, optionally, the parameter gradients."""
    out, cache = net.forward(batch.patches)
    n = len(batch)
    fa = np.broadcast_to(out[0], (n, out.shape[1]))
    fp = np.broadcast_to(out[1], (n, out.shape[1]))
    losses, (ga, gp, gn) = triplet_loss(fa, fp, out[2:], margin)
    loss = float(np.mean(losses))
    if not with_grad:
        return loss, None
    dout = np.empty_like(out)
    dout[0] = ga.sum(axis=0) / n
    dout[1] = gp.sum(axis=0) / n
    dout[2:] = gn / n
    return loss, net.backward(cache, dout)


def tag_batch_loss(net: Network, patches: np.ndarray, targets: np.ndarray, with_grad: bool = True):
    out, cache = net.forward(patches)
    losses, dout = bce_loss(out, targets)
    loss = float(np.mean(losses))
    if not with_grad:
        return loss, None
    return loss, net.backward(cache, dout / len(out))


def _train_loop(net, cfg, n_units, make_batch, batch_loss, val_set):
    state = OptimizerState.zeros_like(net.params)
    stopper = EarlyStopping(cfg.patience)
    report = TrainReport()
    n_batches = n_units if cfg.batches_per_epoch is None else cfg.batches_per_epoch
    for epoch in range(1, cfg.max_epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = np.concatenate([rng.permutation(n_units) for _ in range(-(-n_batches // n_units))])
        total = 0.0
        try:
            for b in range(n_batches):
                batch = make_batch(int(order[b]), _sub_seed(cfg.seed, epoch, b))
                loss, grads = batch_loss(net, batch, True)
                if not math.isfinite(loss):
                    raise FloatingPointError("non-finite training loss")
                total += loss
                net.params, state = adam_step(net.params, grads, state, cfg)
            val = float(np.mean([batch_loss(net, vb, False)[0] for vb in val_set]))
        except FloatingPointError as exc:
            raise FloatingPointError(f"training diverged at epoch {epoch}: {exc}") from exc
        if not math.isfinite(val):
            raise FloatingPointError(f"training diverged at epoch {epoch}: non-finite validation loss")
        report.train_loss.append(total / n_batches)
        report.val_loss.append(val)
        log.info("epoch %d  train %.5f  val %.5f", epoch, report.train_loss[-1], val)
        stop = stopper.update(val, net.params)
        report.stopped_epoch = epoch
        if stop:
            break
    report.best_epoch = stopper.best_epoch
    net.params = stopper.best_params
    return net, report


def train_triplet(corpus: Corpus, triplets: TripletSet, val_triplets: TripletSet,
                  model_cfg: ModelConfig, cfg: TrainConfig) -> tuple[Network, TrainReport]:
    """Fit an embed-mode network with the triplet hinge loss."""
    if model_cfg.mode != "embed":
        raise ValueError("triplet training needs an embed-mode model")
    groups = triplets.groups()
    val_groups = val_triplets.groups()
    if not groups or not val_groups:
        raise ValueError("triplet training needs non-empty training and validation triplets")
    net = Network(model_cfg, seed=_sub_seed(cfg.seed, 0xC0FFEE))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pick = np.random.default_rng([cfg.seed, 0xFA1]).permutation(len(val_groups))[:cfg.val_batches]
        val_set = [build_minibatch(val_groups, corpus, cfg.batch_triplets, _sub_seed(cfg.seed, 0xFA1, g), group=int(g))
                   for g in pick]

    def make_batch(g, seed):
        return build_minibatch(groups, corpus, cfg.batch_triplets, seed, group=g)

    def batch_loss(net, batch, with_grad):
        return triplet_batch_loss(net, batch, cfg.margin, with_grad)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return _train_loop(net, cfg, len(groups), make_batch, batch_loss, val_set)


def train_tagger(corpus: Corpus, split: Split, model_cfg: ModelConfig,
                 cfg: TrainConfig) -> tuple[Network, TrainReport]:
    """Fit a tag-mode network on binarized tags with summed BCE.

    A batch is ``batch_triplets`` training tracks with one random patch each.
    """
    if model_cfg.mode != "tag":
        raise ValueError("tagger training needs a tag-mode model")
    train_ids = np.array(split.train)
    if len(split.validation) == 0 or len(train_ids) == 0:
        raise ValueError("tagger training needs non-empty training and validation sets")
    net = Network(model_cfg, seed=_sub_seed(cfg.seed, 0xC0FFEE))
    targets = {t: binarize_tags(corpus.tracks[t].tags, cfg.binarize_threshold).astype(float)
               for t in corpus.ids}
    bsz = cfg.batch_triplets
    n_units = -(-len(train_ids) // bsz)

    def make_batch(unit, seed):
        rng = np.random.default_rng([seed])
        ids = rng.choice(train_ids, size=min(bsz, len(train_ids)), replace=False)
        patch_seed = int(rng.integers(2**63))
        patches = np.concatenate([corpus.patches(t, 1, patch_seed) for t in ids])
        return patches, np.stack([targets[int(t)] for t in ids])

    val_ids = list(split.validation)
    val_set = []
    for start in range(0, len(val_ids), bsz):
        chunk = val_ids[start:start + bsz]
        seed = _sub_seed(cfg.seed, 0xFA1, start)
        patches = np.concatenate([corpus.patches(t, 2, seed) for t in chunk])
        val_set.append((patches, np.repeat(np.stack([targets[t] for t in chunk]), 2, axis=0)))

    def batch_loss(net, batch, with_grad):
        return tag_batch_loss(net, batch[0], batch[1], with_grad)

    return _train_loop(net, cfg, n_units, make_batch, batch_loss, val_set)


def train(corpus: Corpus, split: Split, model_cfg: ModelConfig, cfg: TrainConfig,
          triplets: TripletSet | None = None, val_triplets: TripletSet | None = None):
    """Dispatch on the model mode: triplet loss for ``embed``, BCE for ``tag``."""
    if model_cfg.mode == "embed":
        if triplets is None or val_triplets is None:
            raise ValueError("embed-mode training needs training and validation triplets")
        return train_triplet(corpus, triplets, val_triplets, model_cfg, cfg)
    return train_tagger(corpus, split, model_cfg, cfg)
