"""Synthetic classification episodes drawn from random structural causal models.

Two priors are provided. The MLP-style prior computes every node as a random
activation of a weighted parent sum plus Gaussian noise; the tree prior uses
random decision trees over the parents, giving piecewise-constant mechanisms.
One node is held out, quantile-binned into K classes and used as the label;
all other nodes are exposed as features.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tasks import TabularTask

log = logging.getLogger(__name__)

CLAMP = 1e6
N_RFF = 256


def _selu(x):
    alpha, scale = 1.6732632423543772, 1.0507009873554805
    return scale * np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0)))


ACTIVATIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda x: x,
    "tanh": np.tanh,
    "leaky_relu": lambda x: np.where(x > 0, x, 0.01 * x),
    "elu": lambda x: np.where(x > 0, x, np.expm1(np.minimum(x, 0))),
    "relu": lambda x: np.maximum(x, 0),
    "relu6": lambda x: np.clip(x, 0, 6),
    "selu": _selu,
    "silu": lambda x: x / (1 + np.exp(-x)),
    "softplus": lambda x: np.logaddexp(0, x),
    "hardtanh": lambda x: np.clip(x, -1, 1),
    "sign": np.sign,
    "sin": np.sin,
    "rbf": lambda x: np.exp(-(x**2)),
    "exp": np.exp,
    "sqrt_abs": lambda x: np.sqrt(np.abs(x)),
    "square": lambda x: x**2,
    "abs": np.abs,
    "indicator": lambda x: (np.abs(x) <= 1).astype(np.float64),
}
MENU = tuple(ACTIVATIONS) + ("rff",)


@dataclass
class RffParams:
    a: np.ndarray  # frequencies, U[0, N]
    b: np.ndarray  # phases, U[0, 2 pi]
    w: np.ndarray  # a ** -exp(u)
    z: np.ndarray  # N(0, I) readout
    u: float

    @classmethod
    def sample(cls, rng: np.random.Generator, N: int = N_RFF) -> "RffParams":
        b = rng.uniform(0, 2 * np.pi, N)
        a = rng.uniform(0, N, N)
        u = rng.uniform(0.7, 3.0)
        w = a ** (-np.exp(u))
        z = rng.standard_normal(N)
        return cls(a=a, b=b, w=w, z=z, u=float(u))

    def features(self, x: np.ndarray) -> np.ndarray:
        """phi(x): (..., N)."""
        scale = self.w / np.linalg.norm(self.w)
        return scale * np.sin(np.multiply.outer(x, self.a) + self.b)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.features(x) @ self.z


@dataclass
class DecisionTree:
    """Complete binary tree stored level by level (heap order)."""

    depth: int
    feature: np.ndarray  # parent slot per internal node
    threshold: np.ndarray
    leaves: np.ndarray

    def __call__(self, parents: np.ndarray) -> np.ndarray:
        node = np.zeros(parents.shape[0], dtype=np.int64)
        rows = np.arange(parents.shape[0])
        for _ in range(self.depth):
            go_right = parents[rows, self.feature[node]] > self.threshold[node]
            node = 2 * node + 1 + go_right
        return self.leaves[node - (2**self.depth - 1)]


@dataclass
class ScmGraph:
    m_total: int
    adjacency: np.ndarray  # (m, m) bool, i -> j only for i < j
    activation: list
    noise: np.ndarray
    weights: list  # per node, weights over its parents
    rff: dict = field(default_factory=dict)
    trees: dict = field(default_factory=dict)

    def parents(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[:, j])

    def topological_order(self) -> list[int]:
        indeg = self.adjacency.sum(axis=0).astype(int)
        ready = [j for j in range(self.m_total) if indeg[j] == 0]
        order = []
        while ready:
            i = ready.pop()
            order.append(i)
            for j in np.flatnonzero(self.adjacency[i]):
                indeg[j] -= 1
                if indeg[j] == 0:
                    ready.append(int(j))
        if len(order) != self.m_total:
            raise ValueError("graph has a cycle")
        return order


@dataclass
class ScmConfig:
    n_samples: int = 1024
    n_features: tuple = (2, 10)  # inclusive range of exposed features
    n_classes: tuple = (2, 10)
    edge_prob: tuple = (0.2, 0.6)
    noise_scale: tuple = (0.01, 0.3)
    train_fraction: tuple = (0.5, 0.8)
    activations: Optional[Sequence[str]] = None  # None = full menu
    tree_depths: tuple = (1, 2, 3, 4)
    tree_ratio: float = 0.5  # share of episodes drawn from the tree prior

    def menu(self) -> tuple:
        return MENU if self.activations is None else tuple(self.activations)


class DegenerateTarget(ValueError):
    pass


def sample_dag(m_total: int, rng: np.random.Generator, edge_prob: tuple = (0.2, 0.6)) -> np.ndarray:
    """Adjacency of a random DAG: nodes are in topological order, each forward pair linked with prob p."""
    if m_total < 2:
        raise ValueError("a causal graph needs at least two nodes")
    p = rng.uniform(*edge_prob)
    upper = np.triu(np.ones((m_total, m_total), dtype=bool), k=1)
    return upper & (rng.random((m_total, m_total)) < p)


def sample_graph(m_total: int, rng: np.random.Generator, cfg: Optional[ScmConfig] = None) -> ScmGraph:
    cfg = cfg or ScmConfig()
    adj = sample_dag(m_total, rng, cfg.edge_prob)
    menu = cfg.menu()
    acts = [menu[i] for i in rng.integers(len(menu), size=m_total)]
    noise = rng.uniform(*cfg.noise_scale, size=m_total)
    weights = [rng.standard_normal(int(adj[:, j].sum())) for j in range(m_total)]
    g = ScmGraph(m_total=m_total, adjacency=adj, activation=acts, noise=noise, weights=weights)
    for j, a in enumerate(acts):
        if a == "rff":
            g.rff[j] = RffParams.sample(rng)
    return g


def apply_activation(name: str, x: np.ndarray, rff: Optional[RffParams] = None) -> np.ndarray:
    if name == "rff":
        if rff is None:
            raise ValueError("rff activation needs sampled parameters")
        return rff(x)
    try:
        fn = ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"activation {name!r} is not on the menu") from None
    with np.errstate(over="ignore", invalid="ignore"):
        return fn(x)


def eval_node(
    parent_values: Optional[np.ndarray],
    activation: str,
    weights: Optional[np.ndarray],
    sigma: float,
    rng: np.random.Generator,
    rff: Optional[RffParams] = None,
    n: Optional[int] = None,
):
    """One node over a batch of samples: f(parents @ w) + N(0, sigma^2).

    Roots (no parents) draw N(0, 1). Returns (values, clamped) where
    ``clamped`` flags values pushed back into [-1e6, 1e6].
    """
    if parent_values is None or parent_values.shape[-1] == 0:
        size = n if parent_values is None else parent_values.shape[0]
        return rng.standard_normal(size), False
    pre = parent_values @ weights
    out = apply_activation(activation, pre, rff)
    if sigma > 0:
        out = out + sigma * rng.standard_normal(out.shape)
    bad = ~np.isfinite(out) | (np.abs(out) > CLAMP)
    if bad.any():
        out = np.nan_to_num(out, nan=0.0, posinf=CLAMP, neginf=-CLAMP)
        out = np.clip(out, -CLAMP, CLAMP)
    return out, bool(bad.any())


def _standardize(v: np.ndarray) -> np.ndarray:
    sd = v.std()
    return (v - v.mean()) / sd if sd > 1e-12 else v - v.mean()


def ancestral_sample(g: ScmGraph, n: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Sample all nodes; every node is standardized before its children read it."""
    values = np.zeros((n, g.m_total))
    n_clamped = 0
    for j in g.topological_order():
        pa = g.parents(j)
        if g.trees.get(j) is not None:
            v = g.trees[j](values[:, pa])
        else:
            w = g.weights[j] / np.sqrt(max(len(pa), 1))
            v, clamped = eval_node(values[:, pa] if len(pa) else None, g.activation[j], w, g.noise[j], rng,
                                   g.rff.get(j), n=n)
            n_clamped += clamped
        values[:, j] = _standardize(v)
    return values, n_clamped


def sample_tree_depth(rng: np.random.Generator, depths: Sequence[int] = (1, 2, 3, 4)) -> int:
    return int(depths[rng.integers(len(depths))])


def sample_tree(parent_values: np.ndarray, depth: int, rng: np.random.Generator) -> DecisionTree:
    """Random thresholds at random quantiles of randomly chosen parents."""
    n_internal = 2**depth - 1
    n_pa = parent_values.shape[1]
    feature = rng.integers(n_pa, size=n_internal)
    q = rng.uniform(0.1, 0.9, size=n_internal)
    threshold = np.array([np.quantile(parent_values[:, f], qi) for f, qi in zip(feature, q)])
    if rng.random() < 0.5:
        leaves = rng.standard_normal(2**depth)
    else:
        leaves = rng.uniform(-1, 1, 2**depth)
    return DecisionTree(depth=depth, feature=feature, threshold=threshold, leaves=leaves)


def quantile_labels(target: np.ndarray, K: int) -> np.ndarray:
    """Bin into at most K classes by empirical quantiles; empty bins are squeezed out."""
    if not 2 <= K <= 10:
        raise ValueError(f"K must lie in [2, 10], got {K}")
    edges = np.quantile(target, np.arange(1, K) / K)
    raw = np.searchsorted(edges, target, side="right")
    _, y = np.unique(raw, return_inverse=True)
    return y.astype(np.int64)


def make_task(
    raw_samples: np.ndarray,
    target_node: int,
    K: int,
    rng: np.random.Generator,
    train_fraction: float = 0.7,
    meta: Optional[dict] = None,
    max_tries: int = 20,
) -> TabularTask:
    y = quantile_labels(raw_samples[:, target_node], K)
    K_real = int(y.max()) + 1
    if K_real < 2:
        raise DegenerateTarget("target collapsed to a single class")
    X = np.delete(raw_samples, target_node, axis=1)
    n = len(y)
    n_train = int(round(train_fraction * n))
    n_train = min(max(n_train, K_real), n - 1)
    for _ in range(max_tries):
        perm = rng.permutation(n)
        if len(np.unique(y[perm[:n_train]])) == K_real:
            meta = dict(meta or {})
            meta.update(K=K_real, K_requested=int(K), target_node=int(target_node))
            return TabularTask(X[perm], y[perm], n_train, meta)
    raise DegenerateTarget("could not place every class in the training split")


def _pick_sizes(cfg: ScmConfig, rng: np.random.Generator):
    m = int(rng.integers(cfg.n_features[0], cfg.n_features[1] + 1))
    K = int(rng.integers(cfg.n_classes[0], cfg.n_classes[1] + 1))
    frac = float(rng.uniform(*cfg.train_fraction))
    return m, K, frac


def _pick_target(g: ScmGraph, rng: np.random.Generator) -> int:
    has_parent = np.flatnonzero(g.adjacency.any(axis=0))
    pool = has_parent if len(has_parent) else np.arange(g.m_total)
    return int(rng.choice(pool))


def generate_scm_dataset(cfg: ScmConfig, rng: np.random.Generator, max_resample: int = 10) -> TabularTask:
    for _ in range(max_resample):
        m, K, frac = _pick_sizes(cfg, rng)
        g = sample_graph(m + 1, rng, cfg)
        values, n_clamped = ancestral_sample(g, cfg.n_samples, rng)
        target = _pick_target(g, rng)
        meta = dict(prior="mlp", n_clamped=int(n_clamped), activations=list(g.activation),
                    edge_prob=list(cfg.edge_prob), noise_scale=list(cfg.noise_scale))
        try:
            return make_task(values, target, K, rng, frac, meta)
        except DegenerateTarget:
            continue
    raise DegenerateTarget(f"no usable target after {max_resample} resamples")


def build_tree_graph(m_total: int, n: int, rng: np.random.Generator, cfg: ScmConfig):
    """Tree-mechanism graph plus its sampled values (trees are fit to the drawn parents)."""
    adj = sample_dag(m_total, rng, cfg.edge_prob)
    g = ScmGraph(m_total=m_total, adjacency=adj, activation=["tree"] * m_total,
                 noise=np.zeros(m_total), weights=[np.zeros(0)] * m_total)
    values = np.zeros((n, m_total))
    for j in g.topological_order():
        pa = g.parents(j)
        if len(pa) == 0:
            g.activation[j] = "root"
            values[:, j] = rng.standard_normal(n)
            continue
        tree = sample_tree(values[:, pa], sample_tree_depth(rng, cfg.tree_depths), rng)
        g.trees[j] = tree
        values[:, j] = tree(values[:, pa])
    return g, values


def generate_tree_scm_dataset(cfg: ScmConfig, rng: np.random.Generator, max_resample: int = 10) -> TabularTask:
    for _ in range(max_resample):
        m, K, frac = _pick_sizes(cfg, rng)
        g, values = build_tree_graph(m + 1, cfg.n_samples, rng, cfg)
        target = _pick_target(g, rng)
        depths = {int(j): t.depth for j, t in g.trees.items()}
        meta = dict(prior="tree", tree_depths=depths, edge_prob=list(cfg.edge_prob))
        try:
            return make_task(values, target, K, rng, frac, meta)
        except DegenerateTarget:
            continue
    raise DegenerateTarget(f"no usable target after {max_resample} resamples")


def generate_episode(cfg: ScmConfig, seed: int, prior: str = "mix") -> TabularTask:
    """Pure function of (cfg, seed, prior)."""
    rng = np.random.default_rng(seed)
    if prior == "mix":
        prior = "tree" if rng.random() < cfg.tree_ratio else "mlp"
    if prior == "tree":
        task = generate_tree_scm_dataset(cfg, rng)
    elif prior == "mlp":
        task = generate_scm_dataset(cfg, rng)
    else:
        raise ValueError(f"unknown prior {prior!r}")
    task.meta["seed"] = int(seed)
    return task


def generate_episodes(cfg: ScmConfig, count: int, seed: int, prior: str = "mix") -> list[TabularTask]:
    seeds = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)
    return [generate_episode(cfg, int(s), prior) for s in seeds]


def linear_config(**kw) -> ScmConfig:
    """Noise-free identity-activation prior with K=2 median splits (linearly separable)."""
    base = dict(activations=("identity",), noise_scale=(0.0, 0.0), n_classes=(2, 2), tree_ratio=0.0)
    base.update(kw)
    return ScmConfig(**base)
