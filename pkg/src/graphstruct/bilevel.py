"""Joint training loop: inner optimizer dynamics on the GCN weights,
truncated reverse-mode hypergradients over windows of tau steps,
straight-through routing into the edge probabilities, projected outer
SGD with exponentially decaying step size, and the two stopping rules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gcn, graphgen, numcore as nc
from .gcn import DropoutMasks, GcnParams, LabeledSplit, LossConfig
from .graphgen import EdgeDistribution
from .numcore import Rng, Tape


class DivergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# inner dynamics

_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8
_V_FLOOR = 1e-16  # keeps d/dv sqrt(v) finite when a gradient entry is exactly 0


@dataclass
class DynState:
    """Inner optimizer state: weights plus adam moment buffers."""

    w1: np.ndarray
    w2: np.ndarray
    m1: np.ndarray
    v1: np.ndarray
    m2: np.ndarray
    v2: np.ndarray
    t: int  # completed updates (bias correction uses t+1)

    @classmethod
    def fresh(cls, params: GcnParams) -> "DynState":
        z = np.zeros_like
        return cls(params.w1.copy(), params.w2.copy(), z(params.w1), z(params.w1),
                   z(params.w2), z(params.w2), 0)

    def params(self) -> GcnParams:
        return GcnParams(self.w1.copy(), self.w2.copy())

    def copy(self) -> "DynState":
        return DynState(*(a.copy() for a in (self.w1, self.w2, self.m1, self.v1,
                                             self.m2, self.v2)), self.t)


@dataclass
class InnerDynamics:
    state: DynState
    gamma: float = 0.01
    kind: str = "adam"  # or "sgd"

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def _advance_nodes(kind, gamma, state_nodes, g1, g2, t):
    """One taped optimizer update; returns the new state as nodes.

    Shared by the forward pass and the hypergradient replay so the two
    produce bit-identical values.
    """
    w1, w2, m1, v1, m2, v2 = state_nodes
    if kind == "sgd":
        return (nc.sub(w1, nc.scale(g1, gamma)), nc.sub(w2, nc.scale(g2, gamma)),
                m1, v1, m2, v2)
    b1c = 1.0 / (1.0 - _ADAM_B1 ** (t + 1))
    b2c = 1.0 / (1.0 - _ADAM_B2 ** (t + 1))

    def upd(w, m, v, g):
        m_n = nc.add(nc.scale(m, _ADAM_B1), nc.scale(g, 1.0 - _ADAM_B1))
        v_n = nc.add(nc.scale(v, _ADAM_B2), nc.scale(nc.mul(g, g), 1.0 - _ADAM_B2))
        denom = nc.add(nc.sqrt(nc.add(nc.scale(v_n, b2c), _V_FLOOR)), _ADAM_EPS)
        w_n = nc.sub(w, nc.scale(nc.div(nc.scale(m_n, b1c), denom), gamma))
        return w_n, m_n, v_n

    w1_n, m1_n, v1_n = upd(w1, m1, v1, g1)
    w2_n, m2_n, v2_n = upd(w2, m2, v2, g2)
    return (w1_n, w2_n, m1_n, v1_n, m2_n, v2_n)


@dataclass
class StepRecord:
    """Everything needed to replay one inner step exactly."""

    state_before: DynState
    state_after: DynState
    sample_seed: int
    masks: DropoutMasks | None
    loss: float
    adjacency: np.ndarray | None = None  # explicit (possibly relaxed) override


def inner_step(dyn: InnerDynamics, dist: EdgeDistribution, x: np.ndarray,
               split: LabeledSplit, cfg: LossConfig, rng: Rng) -> StepRecord:
    """Sample a graph, apply one optimizer update on the training loss."""
    g = graphgen.sample(dist, rng)
    masks = None
    if cfg.dropout_beta > 0.0:
        masks = DropoutMasks.draw(x.shape[0], x.shape[1], dyn.state.w1.shape[1],
                                  cfg.dropout_beta, rng)
    before = dyn.state.copy()
    with Tape() as tape:
        w1 = nc.leaf(dyn.state.w1)
        w2 = nc.leaf(dyn.state.w2)
        loss = gcn.inner_loss((w1, w2), x, g.normalized.to_csr(), split, cfg, masks)
        if not np.isfinite(loss.value):
            raise DivergenceError(f"inner loss is not finite: {loss.value}")
        g1, g2 = nc.grad(loss, [w1, w2])
        state_nodes = (w1, w2, nc.leaf(dyn.state.m1), nc.leaf(dyn.state.v1),
                       nc.leaf(dyn.state.m2), nc.leaf(dyn.state.v2))
        new = _advance_nodes(dyn.kind, dyn.gamma, state_nodes, g1, g2, dyn.state.t)
    dyn.state = DynState(*(nc.value(n).copy() for n in new), dyn.state.t + 1)
    return StepRecord(before, dyn.state.copy(), g.sample_seed, masks, float(loss.value.item()))


def replay_window(window: list[StepRecord], dist: EdgeDistribution, x: np.ndarray,
                  split: LabeledSplit, cfg: LossConfig, kind: str,
                  gamma: float) -> list[DynState]:
    """Re-run recorded steps from their stored seeds; returns the state
    after each step (bit-identical to the forward pass)."""
    states = []
    for rec in window:
        st = rec.state_before
        g = graphgen.resample(dist, rec.sample_seed)
        with Tape():
            w1, w2 = nc.leaf(st.w1), nc.leaf(st.w2)
            loss = gcn.inner_loss((w1, w2), x, g.normalized.to_csr(), split, cfg, rec.masks)
            g1, g2 = nc.grad(loss, [w1, w2])
            state_nodes = (w1, w2, nc.leaf(st.m1), nc.leaf(st.v1),
                           nc.leaf(st.m2), nc.leaf(st.v2))
            new = _advance_nodes(kind, gamma, state_nodes, g1, g2, st.t)
        states.append(DynState(*(nc.value(n).copy() for n in new), st.t + 1))
    return states


# ---------------------------------------------------------------------------
# hypergradient


@dataclass
class HypergradConfig:
    tau: int = 5  # 0 = alternating minimization (direct term only)
    eta: float = 1.0
    eta_decay: float = 0.99
    resample_backward: bool = True
    s_samples: int = 16
    differentiate_normalization: bool = True

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not 0.0 < self.eta_decay <= 1.0:
            raise ValueError("eta_decay must be in (0, 1]")


def _ahat_node(a_leaf, hcfg: HypergradConfig):
    if hcfg.differentiate_normalization:
        return graphgen.normalize_adjacency_node(a_leaf)
    return nc.leaf(graphgen.normalize_adjacency(
        graphgen.SparseMatrix.from_dense(a_leaf.value)).densify(), a_leaf.tape)


def window_adjoint(window: list[StepRecord], final_state: DynState,
                   dist: EdgeDistribution, x: np.ndarray, split: LabeledSplit,
                   cfg: LossConfig, hcfg: HypergradConfig, dyn_kind: str,
                   gamma: float, rng: Rng,
                   eval_adjacency: np.ndarray | None = None) -> np.ndarray:
    """Adjoint accumulation through the last `len(window)` inner steps.

    Returns the raw gradient in adjacency space (one entry per matrix
    position, before any symmetric folding).  The validation loss is
    evaluated at the window's final weights with a freshly sampled graph
    (or, with resampling off, the last recorded one); going backwards,
    the adjoint picks up one adjacency contribution per step.
    """

    def draw_dense(rec: StepRecord) -> np.ndarray:
        if hcfg.resample_backward:
            return graphgen.sample(dist, rng).dense_adjacency()
        if rec.adjacency is not None:
            return np.asarray(rec.adjacency, dtype=np.float64)
        return graphgen.resample(dist, rec.sample_seed).dense_adjacency()

    n_state = 6
    # direct term: d F(w_T, A_T) / d (w, A)
    if eval_adjacency is not None:
        a_eval = np.asarray(eval_adjacency, dtype=np.float64)
    elif hcfg.resample_backward or not window:
        a_eval = graphgen.sample(dist, rng).dense_adjacency()
    else:
        a_eval = draw_dense(window[-1])
    with Tape():
        a = nc.leaf(a_eval)
        a_hat = _ahat_node(a, hcfg)
        w1, w2 = nc.leaf(final_state.w1), nc.leaf(final_state.w2)
        f_val = gcn.outer_loss((w1, w2), x, a_hat, split)
        gw1, gw2, ga = nc.grad(f_val, [w1, w2, a], allow_unused=True)
        p = [nc.value(gw1).copy(), nc.value(gw2).copy(),
             np.zeros_like(final_state.m1), np.zeros_like(final_state.v1),
             np.zeros_like(final_state.m2), np.zeros_like(final_state.v2)]
        big_g = nc.value(ga).copy()

    for rec in reversed(window):
        a_s = draw_dense(rec)
        with Tape():
            a = nc.leaf(a_s)
            a_hat = _ahat_node(a, hcfg)
            st = rec.state_before
            leaves = [nc.leaf(st.w1), nc.leaf(st.w2), nc.leaf(st.m1),
                      nc.leaf(st.v1), nc.leaf(st.m2), nc.leaf(st.v2)]
            g1, g2 = nc.grad(
                gcn.inner_loss((leaves[0], leaves[1]), x, a_hat, split, cfg, rec.masks),
                [leaves[0], leaves[1]])
            new = _advance_nodes(dyn_kind, gamma, leaves, g1, g2, st.t)
            # scalar adjoint product: sum_i <p_i, state_i'>
            dot = None
            for pi, ni in zip(p, new):
                if not np.any(pi):
                    continue
                term = nc.sumall(nc.mul(nc.leaf(pi), ni))
                dot = term if dot is None else nc.add(dot, term)
            if dot is None:
                break
            grads = nc.grad(dot, leaves + [a], allow_unused=True)
            p = [nc.value(gi).copy() for gi in grads[:n_state]]
            big_g = big_g + nc.value(grads[n_state])
    return big_g


def truncated_hypergradient(window: list[StepRecord], final_state: DynState,
                            dist: EdgeDistribution, x: np.ndarray,
                            split: LabeledSplit, cfg: LossConfig,
                            hcfg: HypergradConfig, dyn_kind: str, gamma: float,
                            rng: Rng,
                            eval_adjacency: np.ndarray | None = None) -> np.ndarray:
    """Straight-through hypergradient estimate for theta (single Monte
    Carlo sample)."""
    raw = window_adjoint(window, final_state, dist, x, split, cfg, hcfg,
                         dyn_kind, gamma, rng, eval_adjacency)
    if not np.all(np.isfinite(raw)):
        raise DivergenceError("hypergradient is not finite")
    return graphgen.straight_through_route(raw, dist.symmetric, dist.diag_zero)


def outer_update(dist: EdgeDistribution, g_theta: np.ndarray,
                 eta_current: float) -> EdgeDistribution:
    """Projected gradient step on the edge probabilities."""
    if g_theta.shape != dist.theta.shape:
        raise ValueError("gradient shape mismatch")
    if not np.all(np.isfinite(g_theta)):
        raise DivergenceError("outer gradient is not finite")
    theta = graphgen.project_hypercube(dist.theta - eta_current * g_theta,
                                       symmetric=dist.symmetric,
                                       diag_zero=dist.diag_zero)
    return EdgeDistribution(dist.n, theta, dist.symmetric, dist.diag_zero)


# ---------------------------------------------------------------------------
# stopping state


@dataclass
class StoppingState:
    inner_eps: float = 1e-3
    inner_patience: int = 20
    outer_patience: int = 20
    best_inner_loss: float = np.inf
    inner_stall: int = 0
    best_outer_acc: float = -np.inf
    outer_stall: int = 0
    best_params: GcnParams | None = None
    best_theta: np.ndarray | None = None

    def reset_inner(self):
        self.best_inner_loss = np.inf
        self.inner_stall = 0

    def inner_done(self, loss: float) -> bool:
        """Epoch ends once the loss stops improving (relative eps) for
        `inner_patience` consecutive steps."""
        if loss * (1.0 + self.inner_eps) < self.best_inner_loss:
            self.best_inner_loss = loss
            self.inner_stall = 0
        else:
            self.inner_stall += 1
        return self.inner_stall >= self.inner_patience

    def outer_observe(self, acc: float, params: GcnParams, theta: np.ndarray) -> bool:
        """Track the most recent snapshot among the best-scoring ones.

        Ties refresh the snapshot (later iterates have better-trained
        weights at equal validation accuracy) but still count toward the
        patience budget, so a saturated validation score cannot stall
        the stopping rule forever.
        """
        if acc >= self.best_outer_acc:
            if acc > self.best_outer_acc:
                self.outer_stall = 0
            else:
                self.outer_stall += 1
            self.best_outer_acc = acc
            self.best_params = params.copy()
            self.best_theta = theta.copy()
        else:
            self.outer_stall += 1
        return self.outer_stall >= self.outer_patience


# ---------------------------------------------------------------------------
# full runs


@dataclass
class LdsConfig:
    gamma: float = 0.01
    optimizer: str = "adam"
    hidden: int = 16
    loss: LossConfig = field(default_factory=LossConfig)
    hyper: HypergradConfig = field(default_factory=HypergradConfig)
    inner_eps: float = 1e-3
    inner_patience: int = 20
    outer_patience: int = 20
    max_inner_steps_per_epoch: int = 400
    max_outer_steps: int = 400
    record_test_trace: bool = False


@dataclass
class RunTrace:
    """Per-outer-iteration metrics."""

    inner_loss: list = field(default_factory=list)
    outer_loss: list = field(default_factory=list)
    acc_val_a: list = field(default_factory=list)
    acc_val_b: list = field(default_factory=list)
    acc_test: list = field(default_factory=list)
    expected_edges: list = field(default_factory=list)
    epoch_boundaries: list = field(default_factory=list)  # outer step at each restart
    group_mean_probs: list = field(default_factory=list)  # per-node-group means


@dataclass
class LdsResult:
    params: GcnParams
    dist: EdgeDistribution
    trace: RunTrace
    outer_steps: int
    inner_steps: int


def _group_mean_probs(theta, split: LabeledSplit, edges) -> dict:
    """Mean edge probability from three example nodes (train/val/test) to
    four node groups: true-adjacent, same class, different class,
    unknown class."""
    n = theta.shape[0]
    labels = split.labels
    known = np.zeros(n, dtype=bool)
    for kind in ("train", "val_a", "val_b", "test"):
        known[split.mask(kind)] = True
    adj = np.zeros((n, n), dtype=bool)
    if edges is not None:
        for i, j in edges:
            adj[i, j] = adj[j, i] = True
    out = {}
    for name, mask in (("train", split.train_mask), ("val", split.val_a_mask),
                       ("test", split.test_mask)):
        if len(mask) == 0:
            continue
        v = int(mask[0])
        row = theta[v]
        others = np.arange(n) != v
        groups = {
            "same_class": others & known & (labels == labels[v]),
            "diff_class": others & known & (labels != labels[v]),
            "unknown": others & ~known,
        }
        if edges is not None:
            groups["adjacent"] = others & adj[v]
        out[name] = {k: float(row[m].mean()) if m.any() else 0.0
                     for k, m in groups.items()}
    return out


def run_lds(x: np.ndarray, split: LabeledSplit, init_adjacency,
            cfg: LdsConfig, seed: int, edges=None,
            on_outer_update=None) -> LdsResult:
    """Full structure-learning run from an initial adjacency.

    The edge distribution starts as a point mass on `init_adjacency`;
    inner epochs (weights reinitialized each time) alternate with
    projected hypergradient updates every tau steps; early stopping
    tracks sample-averaged accuracy on the val(B) split.
    """
    rng = Rng(seed)
    n, n_feat = x.shape
    n_classes = split.n_classes()
    dist = EdgeDistribution.deterministic(init_adjacency)
    stop = StoppingState(inner_eps=cfg.inner_eps, inner_patience=cfg.inner_patience,
                         outer_patience=cfg.outer_patience)
    trace = RunTrace()
    hcfg = cfg.hyper
    eta = hcfg.eta
    tau = hcfg.tau
    outer_steps = inner_steps = 0
    epoch = 0
    done = False

    dyn = None
    while not done and outer_steps < cfg.max_outer_steps:
        params = GcnParams.init(n_feat, cfg.hidden, n_classes, rng.derive(1, epoch))
        dyn = InnerDynamics(DynState.fresh(params), gamma=cfg.gamma, kind=cfg.optimizer)
        stop.reset_inner()
        trace.epoch_boundaries.append(outer_steps)
        window: list[StepRecord] = []
        epoch_steps = 0
        while True:
            rec = inner_step(dyn, dist, x, split, cfg.loss, rng)
            inner_steps += 1
            epoch_steps += 1
            window.append(rec)
            if len(window) > max(tau, 1):
                window.pop(0)
            if tau == 0 or epoch_steps % max(tau, 1) == 0:
                hyper_window = [] if tau == 0 else list(window)
                g_theta = truncated_hypergradient(
                    hyper_window, dyn.state, dist, x, split, cfg.loss, hcfg,
                    cfg.optimizer, cfg.gamma, rng)
                dist = outer_update(dist, g_theta, eta)
                eta *= hcfg.eta_decay
                outer_steps += 1
                window = []
                if on_outer_update is not None:
                    on_outer_update(dist, dyn.state.params(), outer_steps)

                params_now = dyn.state.params()
                pred = gcn.predict_empirical(params_now, x, dist, hcfg.s_samples,
                                             rng.derive(2, outer_steps))
                acc_b = gcn.accuracy(pred, split, "val_b")
                acc_a = gcn.accuracy(pred, split, "val_a")
                trace.inner_loss.append(rec.loss)
                trace.acc_val_a.append(acc_a)
                trace.acc_val_b.append(acc_b)
                trace.expected_edges.append(dist.expected_edges())
                trace.group_mean_probs.append(_group_mean_probs(dist.theta, split, edges))
                g_eval = graphgen.sample(dist, rng.derive(3, outer_steps))
                probs_a = gcn.forward_np(params_now, x, g_eval.normalized.to_csr())
                m_a = split.mask("val_a")
                trace.outer_loss.append(float(
                    -np.log(np.maximum(probs_a[m_a, split.labels_for("val_a")], 1e-300)).sum()))
                if cfg.record_test_trace:
                    trace.acc_test.append(gcn.accuracy(pred, split, "test"))
                if stop.outer_observe(acc_b, params_now, dist.theta):
                    done = True
                if outer_steps >= cfg.max_outer_steps:
                    done = True
            if done or stop.inner_done(rec.loss) or epoch_steps >= cfg.max_inner_steps_per_epoch:
                break
        epoch += 1

    best_params = stop.best_params if stop.best_params is not None else dyn.state.params()
    best_theta = stop.best_theta if stop.best_theta is not None else dist.theta
    best_dist = EdgeDistribution(n, best_theta, dist.symmetric, dist.diag_zero)
    return LdsResult(best_params, best_dist, trace, outer_steps, inner_steps)


# ---------------------------------------------------------------------------
# fixed-graph GCN training (vanilla and random-edge baselines)


@dataclass
class GcnTrainConfig:
    gamma: float = 0.01
    optimizer: str = "adam"
    hidden: int = 16
    loss: LossConfig = field(default_factory=LossConfig)
    patience: int = 20
    max_steps: int = 1000
    eval_every: int = 5
    rnd_edges: int = 0  # extra random edges drawn fresh at every step


@dataclass
class GcnTrainResult:
    params: GcnParams
    trace: RunTrace
    steps: int


def _with_random_edges(base_dense: np.ndarray, count: int, rng: Rng) -> np.ndarray:
    n = base_dense.shape[0]
    a = base_dense.copy()
    ii = rng.integers(0, n, size=count)
    jj = rng.integers(0, n, size=count)
    keep = ii != jj
    a[ii[keep], jj[keep]] = 1.0
    a[jj[keep], ii[keep]] = 1.0
    return a


def train_gcn(x: np.ndarray, split: LabeledSplit, adjacency,
              cfg: GcnTrainConfig, seed: int, val_kind: str = "val") -> GcnTrainResult:
    """Train a GCN on a fixed (possibly weighted) graph with early
    stopping on validation accuracy.

    With rnd_edges > 0, that many uniformly random edges are added to
    the graph at every optimization step (fresh draw each time).
    """
    rng = Rng(seed)
    n, n_feat = x.shape
    params = GcnParams.init(n_feat, cfg.hidden, split.n_classes(), rng.derive(1))
    dyn = InnerDynamics(DynState.fresh(params), gamma=cfg.gamma, kind=cfg.optimizer)
    base = adjacency.densify() if isinstance(adjacency, graphgen.SparseMatrix) \
        else np.asarray(adjacency, dtype=np.float64)
    a_hat_fixed = graphgen.normalize_adjacency(
        graphgen.SparseMatrix.from_dense(base)).to_csr()
    trace = RunTrace()
    best_acc, best_params, stall = -np.inf, params.copy(), 0
    steps = 0
    while steps < cfg.max_steps:
        if cfg.rnd_edges > 0:
            a = _with_random_edges(base, cfg.rnd_edges, rng)
            a_hat = graphgen.normalize_adjacency(graphgen.SparseMatrix.from_dense(a)).to_csr()
        else:
            a_hat = a_hat_fixed
        masks = None
        if cfg.loss.dropout_beta > 0.0:
            masks = DropoutMasks.draw(n, n_feat, cfg.hidden, cfg.loss.dropout_beta, rng)
        with Tape():
            w1, w2 = nc.leaf(dyn.state.w1), nc.leaf(dyn.state.w2)
            loss = gcn.inner_loss((w1, w2), x, a_hat, split, cfg.loss, masks)
            if not np.isfinite(loss.value):
                raise DivergenceError("training loss is not finite")
            g1, g2 = nc.grad(loss, [w1, w2])
            leaves = (w1, w2, nc.leaf(dyn.state.m1), nc.leaf(dyn.state.v1),
                      nc.leaf(dyn.state.m2), nc.leaf(dyn.state.v2))
            new = _advance_nodes(dyn.kind, dyn.gamma, leaves, g1, g2, dyn.state.t)
        dyn.state = DynState(*(nc.value(v).copy() for v in new), dyn.state.t + 1)
        steps += 1
        if steps % cfg.eval_every == 0:
            pred = gcn.forward_np(dyn.state.params(), x, a_hat_fixed)
            acc = gcn.accuracy(pred, split, val_kind)
            trace.inner_loss.append(float(loss.value.item()))
            trace.acc_val_a.append(acc)
            if acc > best_acc:
                best_acc, best_params, stall = acc, dyn.state.params(), 0
            else:
                stall += 1
                if stall >= cfg.patience:
                    break
    return GcnTrainResult(best_params, trace, steps)
