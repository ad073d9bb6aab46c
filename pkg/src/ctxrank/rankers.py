"""Trainable object rankers.

Every model maps a task ``X`` of shape ``(n, d)`` to one score per object and
ranks by descending score. The neural models additionally expose a batched
forward/backward pair over stacks of equal-size tasks ``(B, n, d)`` which the
training loop uses.

* ``FetaNetModel`` scores each object with a zeroth-order utility plus the mean
  of its learned pairwise relation to every other object.
* ``FateNetModel`` embeds every object, averages the embeddings into one task
  representative and scores each object jointly with that representative.
* ``LatentUtilityModel`` is a context-free deep scorer (RankNet/ListNet style).
* ``LinearModel`` is the expected-rank-regression baseline.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import nncore
from .dataset import Dataset
from .nncore import DenseNet, DivergenceError, TrainConfig
from .ranklosses import (
    hinge_rank_loss,
    listnet_topk_loss,
    pl_loss,
    rank_from_scores,
    ranknet_loss,
    zero_one_rank_loss,
)

log = logging.getLogger(__name__)

FETA, FATE, RANKNET, LISTNET, ERR = "feta", "fate", "ranknet", "listnet", "err"
HINGE, PL, RANKNET_LOSS, LISTNET_K = "hinge", "pl", "ranknet", "listnet"

MODEL_FORMAT = "ctxrank-model"
MODEL_VERSION = 1

DEFAULT_ARCH = {
    FETA: {"pair_hidden": [32, 32], "zeroth_hidden": [32], "bounded": True},
    FATE: {"embed_hidden": [32], "embedding": 16, "joint_hidden": [32, 32]},
    RANKNET: {"hidden": [32, 32]},
    LISTNET: {"hidden": [32, 32], "k": 3},
    ERR: {"ridge": 1e-6},
}

COMPATIBLE_LOSSES = {
    FETA: (HINGE, PL),
    FATE: (HINGE, PL),
    RANKNET: (RANKNET_LOSS,),
    LISTNET: (LISTNET_K,),
}

DEFAULT_LOSS = {FETA: HINGE, FATE: HINGE, RANKNET: RANKNET_LOSS, LISTNET: LISTNET_K}


def _task(model_dim: int, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model_dim:
        raise ValueError(f"task of shape {X.shape} does not match model dimension {model_dim}")
    if len(X) == 0:
        raise ValueError("empty task")
    return X


class _NeuralModel:
    kind: str
    dim: int
    arch: dict

    def nets(self) -> list[DenseNet]:
        raise NotImplementedError

    def params(self) -> list[np.ndarray]:
        return [p for net in self.nets() for p in net.params()]

    def set_params(self, params: list[np.ndarray]) -> None:
        i = 0
        for net in self.nets():
            k = len(net.params())
            net.set_params(params[i : i + k])
            i += k

    def forward_batch(self, X: np.ndarray):
        raise NotImplementedError

    def backward_batch(self, cache, dS: np.ndarray) -> list[np.ndarray]:
        raise NotImplementedError

    def batch_scores(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[2] != self.dim:
            raise ValueError(f"batch of shape {X.shape} does not match model dimension {self.dim}")
        return self.forward_batch(X)[0]

    def scores(self, X) -> np.ndarray:
        return self.forward_batch(_task(self.dim, X)[None])[0][0]

    def predict(self, X) -> np.ndarray:
        return rank_from_scores(self.scores(X))


# -- FETA -------------------------------------------------------------------


def _canonical_pairs(X: np.ndarray):
    """Orient every unordered pair by lexicographic order of the feature vectors.

    Returns ``(left, right, tie)`` index arrays of shape (B, P); identical
    feature vectors are flagged as ties.
    """
    B, n, _ = X.shape
    first, second = np.triu_indices(n, k=1)
    diff = X[:, second] - X[:, first]
    nonzero = diff != 0.0
    tie = ~nonzero.any(axis=-1)
    lead = np.take_along_axis(diff, nonzero.argmax(axis=-1)[..., None], axis=-1)[..., 0]
    swap = lead < 0.0
    left = np.where(swap, second, first)
    right = np.where(swap, first, second)
    return left, right, tie


@dataclass
class FetaNetModel(_NeuralModel):
    """First-order FETA: U0(x_i) plus the mean pairwise relation r_ij over j != i.

    For each unordered pair the pair net is evaluated once on ``[x_l, x_r]``
    (``x_l`` lexicographically smaller); its two heads give ``r_lr`` and
    ``r_rl``. Identical objects get the average of both heads. With
    ``arch["bounded"]`` both utilities pass through a logistic squash so that
    U0 and every r_ij lie in [0, 1].
    """

    pair_net: DenseNet
    zeroth_net: DenseNet
    arch: dict = field(default_factory=dict)
    kind: str = FETA

    @property
    def dim(self) -> int:
        return self.zeroth_net.input_width

    def nets(self):
        return [self.pair_net, self.zeroth_net]

    def forward_batch(self, X):
        B, n, d = X.shape
        u0, tape0 = self.zeroth_net.forward(X)
        u0 = self._squash(u0[..., 0])
        if n == 1:
            return u0, (n, tape0, u0, None)
        left, right, tie = _canonical_pairs(X)
        rows = np.arange(B)[:, None]
        pairs = np.concatenate([X[rows, left], X[rows, right]], axis=-1)
        out, tape_pair = self.pair_net.forward(pairs)
        out = self._squash(out)
        a = np.where(tie, 0.5, 1.0)
        r_lr = a * out[..., 0] + (1.0 - a) * out[..., 1]
        r_rl = (1.0 - a) * out[..., 0] + a * out[..., 1]
        rel = np.zeros((B, n, n))
        rel[rows, left, right] = r_lr
        rel[rows, right, left] = r_rl
        s = u0 + rel.sum(axis=-1) / (n - 1)
        return s, (n, tape0, u0, (tape_pair, out, left, right, a))

    @property
    def bounded(self) -> bool:
        return bool(self.arch.get("bounded", False))

    def _squash(self, z):
        return 0.5 * (1.0 + np.tanh(0.5 * z)) if self.bounded else z

    def _squash_grad(self, y, g):
        return g * y * (1.0 - y) if self.bounded else g

    def backward_batch(self, cache, dS):
        n, tape0, u0, pair_cache = cache
        g0 = self.zeroth_net.backward(tape0, self._squash_grad(u0, dS)[..., None])
        if pair_cache is None:
            return [np.zeros_like(p) for p in self.pair_net.params()] + g0
        tape_pair, out, left, right, a = pair_cache
        g = dS / (n - 1)
        gl = np.take_along_axis(g, left, axis=-1)
        gr = np.take_along_axis(g, right, axis=-1)
        d_out = np.stack([a * gl + (1.0 - a) * gr, (1.0 - a) * gl + a * gr], axis=-1)
        return self.pair_net.backward(tape_pair, self._squash_grad(out, d_out)) + g0

    def relation(self, X) -> np.ndarray:
        """The n x n pairwise relation (diagonal zero) for one task."""
        X = _task(self.dim, X)[None]
        n = X.shape[1]
        left, right, tie = _canonical_pairs(X)
        out = self._squash(self.pair_net(np.concatenate([X[0, left[0]], X[0, right[0]]], axis=-1)))
        a = np.where(tie[0], 0.5, 1.0)
        rel = np.zeros((n, n))
        rel[left[0], right[0]] = a * out[:, 0] + (1 - a) * out[:, 1]
        rel[right[0], left[0]] = (1 - a) * out[:, 0] + a * out[:, 1]
        return rel


def feta_score(model: FetaNetModel, Q) -> np.ndarray:
    return model.scores(Q)


# -- FATE -------------------------------------------------------------------


@dataclass
class FateNetModel(_NeuralModel):
    """FATE with each object included in its own context (mu computed once per task)."""

    embed_net: DenseNet
    joint_net: DenseNet
    arch: dict = field(default_factory=dict)
    kind: str = FATE

    @property
    def dim(self) -> int:
        return self.embed_net.input_width

    def nets(self):
        return [self.embed_net, self.joint_net]

    def forward_batch(self, X):
        B, n, d = X.shape
        z, tape_e = self.embed_net.forward(X)
        mu = z.mean(axis=1)
        joint_in = np.concatenate([X, np.broadcast_to(mu[:, None, :], (B, n, mu.shape[-1]))], axis=-1)
        s, tape_j = self.joint_net.forward(joint_in)
        return s[..., 0], (n, d, tape_e, tape_j)

    def backward_batch(self, cache, dS):
        n, d, tape_e, tape_j = cache
        # input gradient must be taken before backward() consumes the tape
        d_in = nncore.input_gradient(self.joint_net, tape_j, dS[..., None])
        gj = self.joint_net.backward(tape_j, dS[..., None])
        d_mu = d_in[..., d:].sum(axis=1)
        dz = np.broadcast_to(d_mu[:, None, :] / n, tape_e.preacts[-1].shape)
        return self.embed_net.backward(tape_e, dz) + gj

    def representative(self, X) -> np.ndarray:
        return self.embed_net(_task(self.dim, X)).mean(axis=0)


def fate_score(model: FateNetModel, Q) -> np.ndarray:
    return model.scores(Q)


# -- context-free baselines -------------------------------------------------


@dataclass
class LatentUtilityModel(_NeuralModel):
    """Deep context-free scorer: each object is scored on its own."""

    net: DenseNet
    arch: dict = field(default_factory=dict)
    kind: str = RANKNET

    @property
    def dim(self) -> int:
        return self.net.input_width

    def nets(self):
        return [self.net]

    def forward_batch(self, X):
        s, tape = self.net.forward(X)
        return s[..., 0], tape

    def backward_batch(self, cache, dS):
        return self.net.backward(cache, dS[..., None])


@dataclass
class LinearModel:
    w: np.ndarray
    b: float
    arch: dict = field(default_factory=dict)
    kind: str = ERR

    @property
    def dim(self) -> int:
        return len(self.w)

    def params(self) -> list[np.ndarray]:
        return [np.asarray(self.w, dtype=np.float64), np.array([self.b])]

    def set_params(self, params):
        self.w = params[0]
        self.b = float(params[1][0])

    def batch_scores(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.w + self.b

    def scores(self, X) -> np.ndarray:
        return _task(self.dim, X) @ self.w + self.b

    def predict(self, X) -> np.ndarray:
        return rank_from_scores(self.scores(X))


def err_fit(data: Dataset, ridge: float = 1e-6) -> LinearModel:
    """Expected rank regression: ridge least squares on normalized rank targets.

    Each object's target is ``1 - position / (n - 1)`` (1 for the best object,
    0 for the worst; 1 for singleton tasks). The intercept is not penalized.
    """
    if len(data) == 0:
        raise ValueError("cannot fit on an empty dataset")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    X = np.concatenate(data.objects)
    t = np.concatenate([1.0 - r / max(len(r) - 1, 1) for r in data.rankings])
    x_mean, t_mean = X.mean(axis=0), t.mean()
    Xc = X - x_mean
    A = Xc.T @ Xc + ridge * len(X) * np.eye(X.shape[1])
    rhs = Xc.T @ (t - t_mean)
    if ridge == 0 and np.linalg.matrix_rank(A) < A.shape[0]:
        raise np.linalg.LinAlgError("singular normal equations; use ridge > 0")
    w = np.linalg.solve(A, rhs)
    return LinearModel(w, float(t_mean - x_mean @ w), {"ridge": ridge})


# -- construction -----------------------------------------------------------


def _hidden_stack(d_in, hidden, d_out, seed):
    return nncore.net_init([d_in, *hidden, d_out], seed)


def build_model(kind: str, dim: int, arch: dict | None = None, seed: int = 0):
    """Freshly initialized model of the given kind; missing arch keys use defaults."""
    if kind not in DEFAULT_ARCH:
        raise ValueError(f"unknown model kind {kind!r}")
    arch = {**DEFAULT_ARCH[kind], **(arch or {})}
    s = np.random.SeedSequence(seed).generate_state(2, dtype=np.uint64)
    if kind == FETA:
        pair = _hidden_stack(2 * dim, arch["pair_hidden"], 2, int(s[0]))
        zeroth = _hidden_stack(dim, arch["zeroth_hidden"], 1, int(s[1]))
        return FetaNetModel(pair, zeroth, arch)
    if kind == FATE:
        m = int(arch["embedding"])
        embed = _hidden_stack(dim, arch["embed_hidden"], m, int(s[0]))
        joint = _hidden_stack(dim + m, arch["joint_hidden"], 1, int(s[1]))
        return FateNetModel(embed, joint, arch)
    if kind in (RANKNET, LISTNET):
        return LatentUtilityModel(_hidden_stack(dim, arch["hidden"], 1, int(s[0])), arch, kind)
    return LinearModel(np.zeros(dim), 0.0, arch)


# -- training ---------------------------------------------------------------


@dataclass
class TrainResult:
    model: object
    loss_trace: list[float]


def loss_fn(loss: str, k: int = 3):
    """Map a loss name to ``f(scores, positions) -> (values, grad)``."""
    if loss == HINGE:
        return lambda s, pi: hinge_rank_loss(pi, s)
    if loss == PL:
        return lambda s, pi: pl_loss(pi, s)
    if loss == RANKNET_LOSS:
        return ranknet_loss
    if loss == LISTNET_K:
        return lambda s, pi: listnet_topk_loss(s, pi, k)
    raise ValueError(f"unknown loss {loss!r}")


def check_compatible(kind: str, loss: str) -> None:
    if kind == ERR:
        return
    if kind not in COMPATIBLE_LOSSES:
        raise ValueError(f"unknown model kind {kind!r}")
    if loss not in COMPATIBLE_LOSSES[kind]:
        allowed = ", ".join(COMPATIBLE_LOSSES[kind])
        raise ValueError(f"loss {loss!r} cannot train a {kind} model (allowed: {allowed})")


def batch_gradient(model, groups, loss, k=3):
    """Mean loss and mean parameter gradient over a batch of tasks.

    ``groups`` is a list of ``(X, R)`` stacks of equal-size tasks.
    """
    f = loss_fn(loss, k)
    total = sum(len(X) for X, _ in groups)
    grads = None
    loss_sum = 0.0
    for X, R in groups:
        if X.shape[1] < 2 and loss in (HINGE, RANKNET_LOSS):
            continue
        S, cache = model.forward_batch(X)
        if not np.all(np.isfinite(S)):
            return float("nan"), [np.zeros_like(p) for p in model.params()]
        values, dS = f(S, R)
        loss_sum += float(np.sum(values))
        g = model.backward_batch(cache, dS / total)
        grads = g if grads is None else [a + b for a, b in zip(grads, g)]
    if grads is None:
        grads = [np.zeros_like(p) for p in model.params()]
    return loss_sum / total, grads


def train_ranker(
    kind: str,
    data: Dataset,
    arch: dict | None = None,
    loss: str | None = None,
    cfg: TrainConfig | None = None,
) -> TrainResult:
    """Fit a ranker by mini-batch Nesterov SGD; ERR is solved in closed form.

    Tasks are the batch unit and gradients are averaged over the tasks in a
    batch. Raises ``DivergenceError`` carrying the epoch index if the loss or
    a gradient becomes non-finite.
    """
    cfg = cfg or TrainConfig()
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if kind == ERR:
        ridge = float({**DEFAULT_ARCH[ERR], **(arch or {})}["ridge"])
        return TrainResult(err_fit(data, ridge), [])
    loss = loss or DEFAULT_LOSS.get(kind, HINGE)
    check_compatible(kind, loss)
    model = build_model(kind, data.dim, arch, cfg.seed)
    k = int(model.arch.get("k", 3))
    shuffle_seed = int(np.random.SeedSequence(cfg.seed).generate_state(3, dtype=np.uint64)[2])
    rng = np.random.default_rng(shuffle_seed)

    stacks = data.size_groups()
    size_of = np.empty(len(data), dtype=np.int64)
    local = np.empty(len(data), dtype=np.int64)
    for n, (idx, _, _) in stacks.items():
        size_of[idx] = n
        local[idx] = np.arange(len(idx))

    params = model.params()
    velocity = [np.zeros_like(p) for p in params]
    trace = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(data))
        epoch_loss = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            groups = []
            for n in np.unique(size_of[batch]):
                sel = local[batch[size_of[batch] == n]]
                _, X, R = stacks[int(n)]
                groups.append((X[sel], R[sel]))
            value, grads = batch_gradient(model, groups, loss, k)
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite training loss in epoch {epoch}", epoch)
            try:
                params, velocity = nncore.nesterov_step(
                    params, nncore.penalized(params, grads, cfg), velocity, cfg
                )
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} in epoch {epoch}", epoch) from None
            if not all(np.all(np.isfinite(p)) for p in params):
                raise DivergenceError(f"non-finite parameters in epoch {epoch}", epoch)
            model.set_params(params)
            epoch_loss += value * len(batch)
        trace.append(epoch_loss / len(data))
        log.debug("%s epoch %d loss %.6f", kind, epoch, trace[-1])
    return TrainResult(model, trace)


# -- evaluation helpers -----------------------------------------------------


def predict_scores(model, data: Dataset) -> list[np.ndarray]:
    """Scores for every task, batched by task size."""
    out: list[np.ndarray] = [None] * len(data)  # type: ignore[list-item]
    for _, (idx, X, _) in data.size_groups().items():
        S = np.concatenate([model.batch_scores(X[i : i + 4096]) for i in range(0, len(X), 4096)])
        for j, i in enumerate(idx):
            out[i] = S[j]
    return out


def training_accuracy(model, data: Dataset) -> float:
    S = predict_scores(model, data)
    return float(np.mean([1.0 - zero_one_rank_loss(r, s) for r, s in zip(data.rankings, S)]))


def sample_subrankings(Q, pi, size: int, count: int, seed: int) -> Dataset:
    """Random sub-tasks of ``size`` items with their induced (re-compacted) rankings."""
    Q = np.asarray(Q, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.int64)
    if not 2 <= size <= len(Q):
        raise ValueError(f"subranking size must be in [2, {len(Q)}], got {size}")
    rng = np.random.default_rng(seed)
    objects, rankings = [], []
    for _ in range(count):
        items = np.sort(rng.choice(len(Q), size=size, replace=False))
        objects.append(Q[items])
        rankings.append(np.argsort(np.argsort(pi[items], kind="stable"), kind="stable"))
    return Dataset(objects, rankings, dim=Q.shape[1])


# -- serialization ----------------------------------------------------------


def dumps_model(model) -> str:
    flat = [float(v) for p in model.params() for v in np.ravel(p)]
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "kind": model.kind,
        "dim": model.dim,
        "arch": model.arch,
        "params": flat,
    }
    return json.dumps(doc) + "\n"


def loads_model(text: str):
    doc = json.loads(text)
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a {MODEL_FORMAT} document")
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {doc.get('version')}")
    model = build_model(doc["kind"], int(doc["dim"]), doc["arch"], seed=0)
    flat = np.array(doc["params"], dtype=np.float64)
    shapes = [p.shape for p in model.params()]
    if len(flat) != sum(int(np.prod(s)) for s in shapes):
        raise ValueError("parameter count does not match the architecture")
    params, i = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        params.append(flat[i : i + size].reshape(shape).copy())
        i += size
    model.set_params(params)
    return model
