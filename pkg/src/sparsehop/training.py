"""Training protocol: stratified splits, Adam, plateau scheduling,
patience-based early stopping, and tie-aware evaluation metrics."""

import csv
import json

import numpy as np
from scipy.stats import rankdata

from .tensor_autodiff import Tensor, Tape, record_op
from .bishop_network import network_forward
from .tabular_embedding import encode_rows

# Rows per recorded forward/backward pass. Gradients over a batch are exact
# sums over micro-chunks, so this only trades peak tape memory against BLAS
# batch size; 8 keeps a default-sized network comfortably inside a few GB.
MICRO_CHUNK = 8


class TrainConfig:
    """Optimization settings. Scheduler patience is half the stopping
    patience so the learning rate can drop before training gives up."""

    def __init__(self, lr=5e-5, betas=(0.9, 0.999), eps=1e-16,
                 scheduler_factor=0.1, scheduler_eps=1e-6,
                 scheduler_patience=10, patience=20, max_epochs=200,
                 batch_size=64, seed=0, loss="cross-entropy",
                 target_train_accuracy=None, micro_chunk=MICRO_CHUNK):
        if lr <= 0 or scheduler_factor <= 0 or scheduler_eps <= 0:
            raise ValueError("rates must be positive")
        if not 0 < betas[0] < 1 or not 0 < betas[1] < 1:
            raise ValueError(f"betas must lie in (0,1), got {betas}")
        if patience > max_epochs:
            raise ValueError(f"patience {patience} exceeds max epochs "
                             f"{max_epochs}")
        if loss not in ("cross-entropy", "squared-error"):
            raise ValueError(f"unknown loss kind {loss!r}")
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.scheduler_factor = float(scheduler_factor)
        self.scheduler_eps = float(scheduler_eps)
        self.scheduler_patience = int(scheduler_patience)
        self.patience = int(patience)
        self.max_epochs = int(max_epochs)
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.loss = loss
        self.target_train_accuracy = target_train_accuracy
        if micro_chunk < 1:
            raise ValueError(f"micro_chunk must be >= 1, got {micro_chunk}")
        self.micro_chunk = int(micro_chunk)


class Dataset:
    """Encoded rows ready for the network: numeric matrix, categorical
    index matrix, and targets (class indices or float values)."""

    def __init__(self, num, cat, y):
        self.num = np.asarray(num, dtype=np.float64)
        self.cat = np.asarray(cat, dtype=np.intp)
        self.y = np.asarray(y)
        if len(self.num) != len(self.y) or len(self.cat) != len(self.y):
            raise ValueError("feature/target row counts differ")

    def __len__(self):
        return len(self.y)

    def take(self, idx):
        return Dataset(self.num[idx], self.cat[idx], self.y[idx])

    @classmethod
    def encode(cls, rows, labels, model):
        num, cat = encode_rows(rows, model.schema, model.bins)
        return cls(num, cat, labels)


def split(items, fractions=(0.7, 0.1, 0.2), seed=0, labels=None):
    """Seeded shuffle, then contiguous split by cumulative-rounded sizes.

    With labels given, each class is split separately at the same
    fractions, keeping every split's class ratio within one row of the
    global ratio. Returns three lists of items (or index arrays when
    items is an integer count).
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    n = items if isinstance(items, int) else len(items)
    rng = np.random.default_rng(seed)

    def cut(indices):
        indices = np.array(indices)
        rng.shuffle(indices)
        m = len(indices)
        a = int(round(m * fractions[0]))
        b = int(round(m * (fractions[0] + fractions[1])))
        return indices[:a], indices[a:b], indices[b:]

    if labels is None:
        parts = cut(np.arange(n))
    else:
        labels = np.asarray(labels)
        if len(labels) != n:
            raise ValueError("labels length does not match items")
        buckets = ([], [], [])
        for cls in np.unique(labels):
            for bucket, piece in zip(buckets, cut(np.flatnonzero(
                    labels == cls))):
                bucket.append(piece)
        parts = tuple(np.concatenate(b) if b else np.array([], dtype=int)
                      for b in buckets)
        parts = tuple(np.sort(p) for p in parts)
    for name, p in zip(("train", "validation", "test"), parts):
        if len(p) == 0:
            raise ValueError(f"{name} split is empty for {n} rows at "
                             f"fractions {fractions}")
    if isinstance(items, int):
        return parts
    return tuple([items[i] for i in p] for p in parts)


# ---------------------------------------------------------------------------
# losses (fused ops: softmax/error and reduction in one backward rule)


def cross_entropy(logits, labels, denom=None):
    """Mean negative log-likelihood of a softmax readout.

    denom overrides the averaging denominator so chunked batches can
    accumulate to the exact full-batch mean.
    """
    z = logits.data
    labels = np.asarray(labels, dtype=np.intp)
    if z.ndim != 2 or len(labels) != z.shape[0]:
        raise ValueError(f"logits {z.shape} vs {len(labels)} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ValueError("label index out of range")
    n = float(z.shape[0] if denom is None else denom)
    zs = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    logp = zs - logsumexp
    out = -logp[np.arange(len(labels)), labels].sum() / n

    def backward(g, needs):
        if not needs[0]:
            return (None,)
        grad = np.exp(logp)
        grad[np.arange(len(labels)), labels] -= 1.0
        return (float(g) * grad / n,)

    return record_op(np.array(out), (logits,), backward)


def squared_error(pred, targets, denom=None):
    """Mean squared error of a single-column prediction."""
    p = pred.data
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.ndim != 2 or p.shape[1] != 1 or p.shape[0] != len(t):
        raise ValueError(f"predictions {p.shape} vs {len(t)} targets")
    n = float(p.shape[0] if denom is None else denom)
    diff = p.reshape(-1) - t
    out = (diff * diff).sum() / n

    def backward(g, needs):
        if not needs[0]:
            return (None,)
        return (float(g) * (2.0 * diff / n).reshape(-1, 1),)

    return record_op(np.array(out), (pred,), backward)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(named_params, state, lr, betas=(0.9, 0.999), eps=1e-16):
    """One Adam update with bias correction; missing grads count as zero.

    The update is staged through a single scratch buffer per parameter so
    the largest transient allocation is one parameter-sized array, not the
    three or four a naive expression would produce (that head-room matters
    once the widest weight matrix runs to tens of millions of entries).
    """
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for (name, p), m, v in zip(named_params, state.m, state.v):
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                f"non-finite gradient in parameter {name!r}")
        buf = np.empty_like(p.data)
        m *= b1
        np.multiply(g, 1.0 - b1, out=buf)
        m += buf
        v *= b2
        np.multiply(g, g, out=buf)
        buf *= 1.0 - b2
        v += buf
        np.divide(v, c2, out=buf)
        np.sqrt(buf, out=buf)
        buf += eps
        np.divide(m, buf, out=buf)
        buf *= lr / c1
        p.data -= buf


# ---------------------------------------------------------------------------
# metrics


def auc_score(labels, scores):
    """Tie-aware Mann-Whitney AUC; None when only one class is present."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


def r2_score(targets, preds):
    targets = np.asarray(targets, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    ss_res = float(((targets - preds) ** 2).sum())
    ss_tot = float(((targets - targets.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot


class Metrics:
    """Evaluation summary; auc is None when undefined (single class)."""

    def __init__(self, loss, auc=None, accuracy=None, r2=None):
        self.loss = loss
        self.auc = auc
        self.accuracy = accuracy
        self.r2 = r2

    def primary(self, task):
        if task == "regression":
            return self.r2
        return self.auc if self.auc is not None else self.accuracy

    def to_dict(self):
        out = {"loss": self.loss}
        for key in ("auc", "accuracy", "r2"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        return out


def softmax_scores(z):
    """Row-wise softmax of a logit matrix."""
    zs = z - z.max(axis=1, keepdims=True)
    e = np.exp(zs)
    return e / e.sum(axis=1, keepdims=True)


def predict_scores(model, data, chunk=64):
    """Forward the whole dataset in inference mode, in bounded chunks."""
    outs = []
    for lo in range(0, len(data), chunk):
        sl = slice(lo, lo + chunk)
        outs.append(network_forward((data.num[sl], data.cat[sl]), model,
                                    rng=None).data)
    if not outs:
        return np.zeros((0, model.config.out_dim))
    return np.concatenate(outs, axis=0)


def evaluate(model, data, task=None):
    """Loss plus AUC/accuracy (classification) or R2 (regression)."""
    task = task or model.config.task
    logits = predict_scores(model, data)
    if task == "regression":
        y = data.y.astype(np.float64)
        preds = logits.reshape(-1)
        loss = float(((preds - y) ** 2).mean()) if len(y) else 0.0
        return Metrics(loss, r2=r2_score(y, preds))
    y = data.y.astype(np.intp)
    probs = softmax_scores(logits)
    eps = 1e-300
    loss = float(-np.log(probs[np.arange(len(y)), y] + eps).mean()) \
        if len(y) else 0.0
    accuracy = float((probs.argmax(axis=1) == y).mean()) if len(y) else 0.0
    auc = auc_score(y, probs[:, 1]) if probs.shape[1] == 2 else None
    return Metrics(loss, auc=auc, accuracy=accuracy, r2=None)


# ---------------------------------------------------------------------------
# training loop


class TrainResult:
    """Last-checkpoint model (the reported one), best-validation parameter
    snapshot, per-epoch history rows, and the stop reason."""

    def __init__(self, model, best_state, history, stopped_reason,
                 best_epoch):
        self.model = model
        self.best_state = best_state
        self.history = history
        self.stopped_reason = stopped_reason
        self.best_epoch = best_epoch


def _snapshot(params):
    return [p.data.copy() for p in params]


def _batch_loss(model, data, idx, cfg, denom, rng):
    """Forward/backward over one batch in micro-chunks, accumulating
    gradients; returns the summed loss contribution (already / denom)."""
    total = 0.0
    for lo in range(0, len(idx), cfg.micro_chunk):
        part = idx[lo:lo + cfg.micro_chunk]
        with Tape() as tape:
            out = network_forward((data.num[part], data.cat[part]),
                                  model, rng=rng)
            if cfg.loss == "cross-entropy":
                loss = cross_entropy(out, data.y[part].astype(np.intp),
                                     denom=denom)
            else:
                loss = squared_error(out, data.y[part], denom=denom)
            tape.backward(loss, free=True)
        total += loss.item()
    return total


def train_loop(model, train_data, val_data, cfg):
    """Adam + plateau scheduler + patience stopping over encoded datasets.

    Improvement means the validation loss decreased below the best seen;
    after cfg.patience consecutive epochs without one, training stops (a
    constant validation loss therefore stops at epoch patience+1). The
    scheduler tracks its own shorter window and multiplies the rate by
    scheduler_factor when that window lapses without improvement of at
    least scheduler_eps. The returned model is the last checkpoint.
    """
    named = model.named_params()
    params = [p for _, p in named]
    state = AdamState(params)
    lr = cfg.lr
    best_loss = np.inf
    best_state, best_epoch = _snapshot(params), 0
    stall = 0
    sched_best, sched_stall = np.inf, 0
    history = []
    stopped = "max-epochs"

    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng((cfg.seed, epoch)).permutation(
            len(train_data))
        drop_rng = np.random.default_rng((cfg.seed, epoch, 1)) \
            if _uses_dropout(model) else None
        train_loss = 0.0
        try:
            for lo in range(0, len(order), cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                for p in params:
                    p.zero_grad()
                train_loss += _batch_loss(model, train_data, idx, cfg,
                                          denom=len(idx), rng=drop_rng) \
                    * (len(idx) / len(order))
                adam_step(named, state, lr, cfg.betas, cfg.eps)
                for p in params:
                    p.grad = None
        except FloatingPointError as err:
            raise FloatingPointError(
                f"training diverged at epoch {epoch}: {err}") from err
        if not np.isfinite(train_loss):
            raise FloatingPointError(
                f"training diverged at epoch {epoch}: loss {train_loss}")

        val = evaluate(model, val_data)
        if not np.isfinite(val.loss):
            raise FloatingPointError(
                f"validation diverged at epoch {epoch}: loss {val.loss}")
        row = {"epoch": epoch, "train_loss": train_loss,
               "val_loss": val.loss, "lr": lr,
               "val_metric": val.primary(model.config.task)}
        history.append(row)

        if val.loss < best_loss:
            best_loss = val.loss
            best_state = _snapshot(params)
            best_epoch = epoch
            stall = 0
        else:
            stall += 1

        if val.loss < sched_best - cfg.scheduler_eps:
            sched_best = val.loss
            sched_stall = 0
        else:
            sched_stall += 1
            if sched_stall > cfg.scheduler_patience:
                lr *= cfg.scheduler_factor
                sched_stall = 0

        if cfg.target_train_accuracy is not None:
            train_acc = val.accuracy if val_data is train_data \
                else evaluate(model, train_data).accuracy
            row["train_accuracy"] = train_acc
            if train_acc is not None \
                    and train_acc >= cfg.target_train_accuracy:
                stopped = "target-accuracy"
                break
        if stall >= cfg.patience:
            stopped = "patience"
            break

    return TrainResult(model, best_state, history, stopped, best_epoch)


def _uses_dropout(model):
    return model.config.dropout > 0.0


def write_history_csv(path, history):
    cols = ["epoch", "train_loss", "val_loss", "lr", "val_metric"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in history:
            writer.writerow([row.get(c, "") for c in cols])


def write_summary_json(path, summary):
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
