"""Episodic training and evaluation of the full model."""

import dataclasses
import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from faith import tensor as T
from faith.classifier import (classification_loss, euclidean_scores, init_bilinear,
                              normalize_scores, task_scores, total_loss)
from faith.data import SamplingError, sample_episode, sample_episode_with_classes
from faith.encoder import embed_batch, init_gin
from faith.hierarchy import (build_batch, dump_adjacency_csv, flat_embeddings,
                             forward_hierarchy, init_hierarchy)
from faith.sampling import (class_distributions, draw_random_rosters, draw_support_rosters,
                            init_sampler_head, prototype_logits, sampling_loss)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    n: int = 2
    k: int = 5
    q: int = 10
    p: int = 10
    alpha: float = 1.0
    learning_rate: float = 1e-3
    dropout: float = 0.5
    steps: int = 1000
    test_episodes: int = 200
    gin_layers: int = 5
    gin_hidden: int = 128
    embed_dim: int = 128
    sampler_hidden: int = 128
    d_s: int = 300
    d_p: int = 300
    d_t: int = 300
    seed: int = 0
    sampler: str = "loss"  # loss | random
    hierarchy: str = "on"  # on | off
    classifier: str = "task"  # task | euclidean
    base_classes: list | None = None
    novel_classes: list | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("n", "k", "q", "gin_layers", "gin_hidden", "embed_dim", "sampler_hidden",
                     "d_s", "d_p", "d_t"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.p < 0 or self.steps < 0 or self.test_episodes < 0:
            raise ValueError("p, steps and test_episodes must be non-negative")
        if self.d_p != self.d_t:
            raise ValueError("d_p must equal d_t")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.sampler not in ("loss", "random"):
            raise ValueError("sampler must be 'loss' or 'random'")
        if self.hierarchy not in ("on", "off"):
            raise ValueError("hierarchy must be 'on' or 'off'")
        if self.classifier not in ("task", "euclidean"):
            raise ValueError("classifier must be 'task' or 'euclidean'")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**d)


def rng_for(seed, stream, *extra):
    """Independent generator for a named substream of ``seed``."""
    return np.random.default_rng([int(seed), zlib.crc32(stream.encode()), *map(int, extra)])


# ------------------------------------------------------------------ Adam

class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class ModelState:
    config: TrainConfig
    params: dict
    optimizer: Adam
    num_features: int
    num_base_classes: int
    meta: dict = field(default_factory=dict)

    def zero_grad(self):
        T.zero_grad(self.params.values())


def init_model(config, num_features, num_base_classes):
    rng = rng_for(config.seed, "init")
    params = init_gin(rng, num_features, config.gin_hidden, config.embed_dim, config.gin_layers)
    if config.sampler == "loss":
        params.update(init_sampler_head(rng, config.embed_dim, num_base_classes,
                                        config.sampler_hidden))
    if config.hierarchy == "on":
        params.update(init_hierarchy(rng, config.embed_dim, config.d_s, config.d_p, config.d_t))
        s_dim, p_dim = config.d_s, config.d_p
    else:
        s_dim = p_dim = config.embed_dim
    if config.classifier == "task":
        params.update(init_bilinear(rng, s_dim, p_dim))
    return ModelState(config, params, Adam(config.learning_rate), num_features, num_base_classes)


# ------------------------------------------------------- episode assembly

def plan_tasks(state, dataset, origin, rng):
    """Current task plus P support tasks drawn from the base classes."""
    cfg = state.config
    t0 = sample_episode(dataset, origin, cfg.n, cfg.k, cfg.q, rng)
    if cfg.p == 0:
        return [t0]
    eligible = dataset.eligible_classes("base", cfg.k, cfg.q, cfg.n)
    if cfg.sampler == "loss":
        # roster choice is not differentiated: no tape, no dropout
        z = embed_batch([dataset.graphs[i] for i in t0.support], state.params)
        _, pooled = class_distributions(z, cfg.k, state.params)
        rosters = draw_support_rosters(pooled.data, cfg.n, cfg.p, dataset.base_classes, rng,
                                       eligible)
    else:
        rosters = draw_random_rosters(cfg.n, cfg.p, dataset.base_classes, rng, eligible)
    supports = [sample_episode_with_classes(dataset, r, cfg.k, cfg.q, rng, "base")
                for r in rosters]
    return [t0] + supports


@dataclass
class ForwardResult:
    loss: T.Value
    class_loss: T.Value
    sample_loss: T.Value | None
    probs: T.Value
    labels: np.ndarray
    batch: object
    adjacency: tuple | None = None


def episode_forward(state, dataset, tasks, train, rng=None, keep_adjacency=False):
    """Loss of one (P+1)-task hierarchy.

    Training classifies every task's queries and adds the sampling loss;
    evaluation classifies task 0's queries only.
    """
    cfg, params = state.config, state.params
    batch = build_batch(tasks)
    graphs = [dataset.graphs[i] for i in batch.graph_rows]
    z_s = embed_batch(graphs, params, train, rng, cfg.dropout)

    sample_loss = None
    if train and cfg.sampler == "loss":
        t0 = tasks[0]
        nk = t0.n * t0.k
        logits = prototype_logits(T.gather_rows(z_s, np.arange(nk)), t0.k, params)
        true = [dataset.base_classes.index(c) for c in t0.classes]
        sample_loss = sampling_loss(logits, true, t0.origin)

    adjacency = None
    if cfg.hierarchy == "on":
        out = forward_hierarchy(batch, z_s, params, train, rng, cfg.dropout,
                                keep_adjacency=keep_adjacency)
        if keep_adjacency:
            out, adjacency = out
        h_s, h_p, h_t = out
    else:
        h_s, h_p, h_t = flat_embeddings(batch, z_s)

    blocks = []
    for k in range(batch.num_tasks if train else 1):
        s = T.gather_rows(h_s, batch.query_rows[k])
        protos = T.gather_rows(h_p, batch.proto_rows(k))
        if cfg.classifier == "task":
            t = T.gather_rows(h_t, [k])
            blocks.append(task_scores(s, protos, t, params["classifier.w"]))
        else:
            blocks.append(euclidean_scores(s, protos))
    scores = blocks[0] if len(blocks) == 1 else T.concat_rows(blocks)
    labels = np.concatenate(batch.query_slots[:len(blocks)])
    probs = normalize_scores(scores)
    class_loss = classification_loss(scores, labels)
    loss = total_loss(class_loss, sample_loss, cfg.alpha)
    return ForwardResult(loss, class_loss, sample_loss, probs, labels, batch, adjacency)


# ------------------------------------------------------------ train/eval

def train_step(state, dataset, rng, dropout_rng=None):
    """One episode: plan, forward on a fresh tape, backward, Adam update."""
    dropout_rng = rng if dropout_rng is None else dropout_rng
    try:
        tasks = plan_tasks(state, dataset, "base", rng)
    except SamplingError as exc:
        raise SamplingError(f"step {state.optimizer.t + 1}: {exc}") from exc
    state.zero_grad()
    with T.Tape() as tape:
        res = episode_forward(state, dataset, tasks, True, dropout_rng)
    T.backward(res.loss, tape)
    state.optimizer.step(state.params)
    state.zero_grad()
    acc = float(np.mean(np.argmax(res.probs.data, axis=1) == res.labels))
    return {
        "total_loss": res.loss.item(),
        "class_loss": res.class_loss.item(),
        "sample_loss": res.sample_loss.item() if res.sample_loss is not None else 0.0,
        "train_acc": acc,
    }


def train(state, dataset, steps=None, callback=None):
    """Run ``steps`` training episodes (default: config.steps); returns the
    per-step reports."""
    cfg = state.config
    steps = cfg.steps if steps is None else steps
    episode_rng = rng_for(cfg.seed, "episodes")
    dropout_rng = rng_for(cfg.seed, "dropout")
    reports = []
    for i in range(steps):
        rep = train_step(state, dataset, episode_rng, dropout_rng)
        rep["step"] = i + 1
        reports.append(rep)
        if callback is not None:
            callback(rep)
        if (i + 1) % 50 == 0:
            log.info("step %d loss %.4f acc %.3f", i + 1, rep["total_loss"], rep["train_acc"])
    return reports


def evaluate(state, dataset, episodes=None, seed=None, adjacency_dir=None):
    """Accuracy over target tasks drawn from the novel classes.

    Each target task uses its own generator derived from (seed, index), so
    any subset of episodes can be recomputed in isolation.
    """
    cfg = state.config
    episodes = cfg.test_episodes if episodes is None else episodes
    seed = cfg.seed if seed is None else seed
    accs = []
    for i in range(episodes):
        rng = rng_for(seed, "eval", i)
        tasks = plan_tasks(state, dataset, "novel", rng)
        res = episode_forward(state, dataset, tasks, False,
                              keep_adjacency=adjacency_dir is not None and i == 0)
        if res.adjacency is not None:
            dump_adjacency_csv(res.adjacency, adjacency_dir)
        accs.append(float(np.mean(np.argmax(res.probs.data, axis=1) == res.labels)))
    accs = np.array(accs)
    std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
    return {
        "mean_accuracy": float(accs.mean()) if len(accs) else float("nan"),
        "std_accuracy": std,
        "episodes": accs.tolist(),
    }
