"""Variational information bottleneck with GMM and action-conditioned HMM priors.

The minimized objective, per transition (s_t, a, y, s_next), is

    ||y - W z_t - b||^2 / (2 sigma_y^2)
        + beta * (log q(z_t|s_t) + log q(z_next|s_next) - log p(z_t, z_next | a))

with z_t, z_next single reparameterized draws from the encoder posteriors.
The GMM prior scores z_t alone; the HMM prior scores the pair through
per-action transition tables between mixture components.  Mixture weights
are uniform and never trained.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels, nn
from .errors import ConfigurationError, TrainingError, UsageError

VAR_FLOOR = 1e-6
PRIOR_KINDS = ("gmm", "hmm")


@dataclass
class VibConfig:
    beta: float = 0.1
    K: int = 6
    d: int = 4
    prior_kind: str = "hmm"
    sigma_y: float = 1.0
    steps: int = 3000
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0
    idealized_mode: bool = False
    hidden: tuple = (64,)
    beta_warmup: float = 0.2
    # "kmeans++": reseed component means from encoded data when warm-up ends
    mean_init: str = "kmeans++"
    seed_sample: int = 4096

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.beta > 0:
            raise ConfigurationError(f"beta must be positive, got {self.beta}")
        if self.K < 2:
            raise ConfigurationError(f"K must be >= 2, got {self.K}")
        if self.d < 1:
            raise ConfigurationError(f"d must be >= 1, got {self.d}")
        if self.prior_kind not in PRIOR_KINDS:
            raise ConfigurationError(f"prior_kind must be one of {PRIOR_KINDS}, got {self.prior_kind!r}")
        if not self.sigma_y > 0:
            raise ConfigurationError("sigma_y must be positive")
        if self.mean_init not in ("normal", "kmeans++"):
            raise ConfigurationError(f"mean_init must be 'normal' or 'kmeans++', got {self.mean_init!r}")

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        if "prior" in d and "prior_kind" not in d:
            d["prior_kind"] = d.pop("prior")
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self):
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out

    def beta_at(self, step):
        """Linearly warmed-up beta for optimization step ``step`` (0-based)."""
        span = self.beta_warmup * self.steps
        if span <= 0:
            return self.beta
        return self.beta * min(1.0, (step + 1) / span)

    @property
    def reseed_step(self):
        """Step at which k-means++ seeding runs (None when disabled)."""
        if self.mean_init != "kmeans++":
            return None
        return min(self.steps - 1, max(0, int(round(self.beta_warmup * self.steps))))


@dataclass
class GaussianPosterior:
    mean: np.ndarray
    variance: np.ndarray


@dataclass
class MixtureParams:
    means: np.ndarray
    variances: np.ndarray
    log_weights: np.ndarray = None

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if self.log_weights is None:
            self.log_weights = np.full(self.K, -np.log(self.K))
        self.log_weights = np.asarray(self.log_weights, dtype=np.float64)
        if self.means.shape != self.variances.shape:
            raise UsageError("means and variances must have the same shape")
        if np.any(self.variances <= 0):
            raise UsageError("mixture variances must be positive")

    @property
    def K(self):
        return self.means.shape[0]

    @property
    def d(self):
        return self.means.shape[1]


@dataclass
class HmmPrior:
    mixture: MixtureParams
    transition_logits: np.ndarray

    @property
    def transition(self):
        """Row-stochastic tables T[a, k, l] = p(c_next = l | c_t = k, a)."""
        return nn.softmax(self.transition_logits, axis=-1)

    @property
    def K(self):
        return self.mixture.K


def _mixture_of(prior):
    return prior.mixture if isinstance(prior, HmmPrior) else prior


def _points(z, d):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[1] != d:
        raise UsageError(f"latent dimension {z.shape[1]} != {d}")
    return z, single


def component_log_densities(z, mixture):
    """log N(z | mu_k, Sigma_k) for each component; (N, K) or (K,)."""
    z, single = _points(z, mixture.d)
    out = kernels.gauss_pairwise(z, mixture.means, mixture.variances)
    return out[0] if single else out


def gmm_log_density(z, mixture):
    """log sum_k rho_k N(z | mu_k, Sigma_k)."""
    z, single = _points(z, mixture.d)
    e = kernels.gauss_pairwise(z, mixture.means, mixture.variances)
    out = nn.logsumexp(e + mixture.log_weights[None, :], axis=1)
    return float(out[0]) if single else out


def hmm_log_density(z_t, z_next, action, prior: HmmPrior):
    """log sum_{k,l} rho_k N(z_t|k) T^a[k,l] N(z_next|l)."""
    mix = prior.mixture
    z_t, single = _points(z_t, mix.d)
    z_next, _ = _points(z_next, mix.d)
    actions = np.broadcast_to(np.asarray(action, dtype=np.int64), (z_t.shape[0],))
    n_actions = prior.transition_logits.shape[0]
    if np.any(actions < 0) or np.any(actions >= n_actions):
        raise UsageError(f"action out of range [0, {n_actions})")
    e_t = kernels.gauss_pairwise(z_t, mix.means, mix.variances)
    e_n = kernels.gauss_pairwise(z_next, mix.means, mix.variances)
    log_trans = nn.log_softmax(prior.transition_logits, axis=-1)
    out, _ = kernels.hmm_pair_lse(e_t, e_n, log_trans, mix.log_weights, actions)
    return float(out[0]) if single else out


def posterior_over_components(z, prior):
    """p(component | z) under the mixture emission model; rows sum to 1."""
    mix = _mixture_of(prior)
    z, single = _points(z, mix.d)
    logits = kernels.gauss_pairwise(z, mix.means, mix.variances) + mix.log_weights[None, :]
    post = nn.softmax(logits, axis=1)
    return post[0] if single else post


def reparam_sample(posterior: GaussianPosterior, rng=None, deterministic=False, noise=None):
    """z = mean + sqrt(variance) * eps with eps standard normal (or ``noise``)."""
    mean = np.asarray(posterior.mean, dtype=np.float64)
    if deterministic:
        return mean.copy()
    if noise is None:
        noise = rng.standard_normal(mean.shape)
    return mean + np.sqrt(posterior.variance) * noise


def diag_gauss_logpdf(z, mean, var):
    d = z - mean
    return -0.5 * np.sum(d * d / var + np.log(var) + nn.LOG_2PI, axis=-1)


class VibModel:
    """Encoder, linear Q-decoder and prior parameters trained jointly."""

    def __init__(self, feature_dim, n_actions, n_outputs, config: VibConfig, rng=None):
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.config = config
        self.feature_dim = int(feature_dim)
        self.n_actions = int(n_actions)
        self.n_outputs = int(n_outputs)
        sizes = (self.feature_dim, *config.hidden)
        self.hidden = [nn.Dense(a, b, rng, name=f"encoder.{i}") for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.mean_head = nn.Dense(sizes[-1], config.d, rng, name="encoder.mean")
        self.var_head = nn.Dense(sizes[-1], config.d, rng, name="encoder.var", init="zeros")
        self.decoder = nn.Dense(config.d, self.n_outputs, rng, name="decoder")
        K, d = config.K, config.d
        self.means = nn.Parameter(rng.standard_normal((K, d)), "prior.means")
        self.var_raw = nn.Parameter(np.full((K, d), nn.inverse_softplus(1.0 - VAR_FLOOR)), "prior.var_raw")
        self.trans_logits = None
        if config.prior_kind == "hmm":
            self.trans_logits = nn.Parameter(np.zeros((self.n_actions, K, K)), "prior.transition_logits")
        self.log_weights = np.full(K, -np.log(K))
        self.loss_trace = np.zeros((0, 3))
        self._graph = None

    # parameters
    def encoder_parameters(self):
        return [p for layer in (*self.hidden, self.mean_head, self.var_head) for p in layer.parameters()]

    def parameter_groups(self):
        groups = {
            "encoder": self.encoder_parameters(),
            "decoder": self.decoder.parameters(),
            "means": [self.means],
            "variances": [self.var_raw],
        }
        if self.trans_logits is not None:
            groups["transition_logits"] = [self.trans_logits]
        return groups

    def parameters(self):
        return [p for group in self.parameter_groups().values() for p in group]

    # numpy inference
    def encode(self, features):
        h = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if h.shape[1] != self.feature_dim:
            raise UsageError(f"feature dimension {h.shape[1]} != {self.feature_dim}")
        for layer in self.hidden:
            h = np.tanh(layer.predict(h))
        return GaussianPosterior(self.mean_head.predict(h), nn.softplus(self.var_head.predict(h)) + VAR_FLOOR)

    def decode(self, z):
        return self.decoder.predict(np.atleast_2d(z))

    @property
    def mixture(self):
        return MixtureParams(self.means.values.copy(), nn.softplus(self.var_raw.values) + VAR_FLOOR, self.log_weights.copy())

    @property
    def prior(self):
        if self.trans_logits is None:
            return self.mixture
        return HmmPrior(self.mixture, self.trans_logits.values.copy())

    def set_prior(self, means=None, variances=None, transition_logits=None):
        if means is not None:
            self.means.values[...] = means
        if variances is not None:
            self.var_raw.values[...] = nn.inverse_softplus(np.asarray(variances) - VAR_FLOOR)
        if transition_logits is not None:
            self.trans_logits.values[...] = transition_logits

    # graph construction
    def _encoder_graph(self, g, x):
        h = x
        for layer in self.hidden:
            h = g.tanh(layer(g, h))
        mean = self.mean_head(g, h)
        var = g.add_const(g.softplus(self.var_head(g, h)), VAR_FLOOR)
        return mean, var

    def loss_graph(self):
        """Cached graph computing (prediction, regularizer) batch means."""
        if self._graph is not None:
            return self._graph
        cfg = self.config
        g = nn.Graph()
        x_t = g.input("x_t", (None, self.feature_dim))
        x_n = g.input("x_next", (None, self.feature_dim))
        y = g.input("y", (None, self.n_outputs))
        actions = g.input("actions", (None,), dtype=np.int64)
        eps_t = g.input("eps_t", (None, cfg.d))
        eps_n = g.input("eps_next", (None, cfg.d))
        m_t, v_t = self._encoder_graph(g, x_t)
        m_n, v_n = self._encoder_graph(g, x_n)
        z_t = g.add(m_t, g.mul(g.sqrt(v_t), eps_t))
        z_n = g.add(m_n, g.mul(g.sqrt(v_n), eps_n))
        pred = g.scale(g.mean(g.squared_error(y, self.decoder(g, z_t))), 0.5 / cfg.sigma_y ** 2)
        log_q = g.add(g.gauss_logpdf(z_t, m_t, v_t), g.gauss_logpdf(z_n, m_n, v_n))
        means = g.param(self.means)
        var = g.add_const(g.softplus(g.param(self.var_raw)), VAR_FLOOR)
        e_t = g.gauss_pairwise(z_t, means, var)
        if self.trans_logits is None:
            log_p = g.logsumexp(g.add_const(e_t, self.log_weights[None, :]), axis=1)
        else:
            e_n = g.gauss_pairwise(z_n, means, var)
            log_p = g.hmm_pair_logsumexp(e_t, e_n, g.param(self.trans_logits), actions, self.log_weights)
        reg = g.mean(g.sub(log_q, log_p))
        self._graph = (g, pred, reg, {"z_t": z_t, "z_next": z_n, "log_q": log_q, "log_p": log_p})
        return self._graph

    # serialization
    def to_dict(self):
        mix = self.mixture
        prior = {"kind": self.config.prior_kind, "K": self.config.K, "d": self.config.d,
                 "means": mix.means.tolist(), "variances": mix.variances.tolist()}
        if self.trans_logits is not None:
            prior["transition_logits"] = self.trans_logits.values.tolist()
        return {
            "encoder": nn.params_to_dict(self.encoder_parameters()),
            "decoder": nn.params_to_dict(self.decoder.parameters()),
            "prior": prior,
            "config": self.config.to_dict(),
            "shapes": {"feature_dim": self.feature_dim, "n_actions": self.n_actions, "n_outputs": self.n_outputs},
        }

    @classmethod
    def from_dict(cls, doc):
        cfg = VibConfig.from_dict(doc["config"])
        sh = doc["shapes"]
        model = cls(sh["feature_dim"], sh["n_actions"], sh["n_outputs"], cfg)
        nn.load_params(model.encoder_parameters(), doc["encoder"])
        nn.load_params(model.decoder.parameters(), doc["decoder"])
        prior = doc["prior"]
        model.set_prior(np.array(prior["means"]), np.array(prior["variances"]),
                        np.array(prior["transition_logits"]) if "transition_logits" in prior else None)
        return model

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class LossTerms:
    prediction: float
    regularizer: float
    beta: float
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.prediction + self.beta * self.regularizer


def _feed(model, batch, noise):
    return {
        "x_t": batch.s_t,
        "x_next": batch.s_next,
        "y": batch.y,
        "actions": batch.a,
        "eps_t": noise[0],
        "eps_next": noise[1],
    }


def _draw_noise(model, n, rng):
    if rng is None:
        raise UsageError("an rng or explicit noise is required outside idealized mode")
    d = model.config.d
    return rng.standard_normal((n, d)), rng.standard_normal((n, d))


def vib_loss(model: VibModel, batch, rng=None, beta=None, noise=None):
    """Minimization objective averaged over ``batch``, decomposed into terms.

    In idealized mode the encoder is deterministic (z = posterior mean), the
    encoder entropy terms vanish, and each component emits exactly its mean,
    so the prior term reduces to -log(rho_k T^a[k, l]) for the components hit.
    """
    beta = model.config.beta if beta is None else beta
    if model.config.idealized_mode:
        return _idealized_vib_loss(model, batch, beta)
    if noise is None:
        noise = _draw_noise(model, len(batch), rng)
    g, pred, reg, _ = model.loss_graph()
    g.forward(_feed(model, batch, noise))
    terms = LossTerms(float(pred.value), float(reg.value), beta)
    if not np.isfinite(terms.total):
        raise TrainingError("non-finite VIB loss")
    return terms


def vib_loss_and_grads(model: VibModel, batch, beta=None, noise=None, rng=None):
    """Loss terms plus the gradient of the total w.r.t. every parameter group."""
    beta = model.config.beta if beta is None else beta
    if noise is None:
        noise = _draw_noise(model, len(batch), rng)
    g, pred, reg, _ = model.loss_graph()
    g.forward(_feed(model, batch, noise))
    params = model.parameters()
    for p in params:
        p.zero_grad()
    g.backward({pred: 1.0, reg: beta})
    grads = {name: [p.grad.copy() for p in group] for name, group in model.parameter_groups().items()}
    return LossTerms(float(pred.value), float(reg.value), beta), grads


def _component_hits(z, means, atol=1e-9):
    """log emission under the identity observation model: 0 at a mean, -inf elsewhere."""
    dist = np.max(np.abs(z[:, None, :] - means[None, :, :]), axis=2)
    return np.where(dist <= atol, 0.0, -np.inf)


def _idealized_vib_loss(model, batch, beta):
    z_t = model.encode(batch.s_t).mean
    z_n = model.encode(batch.s_next).mean
    err = np.sum((batch.y - model.decode(z_t)) ** 2, axis=1)
    pred = float(np.mean(err)) * 0.5 / model.config.sigma_y ** 2
    e_t = _component_hits(z_t, model.means.values)
    if model.trans_logits is None:
        log_p = nn.logsumexp(e_t + model.log_weights[None, :], axis=1)
    else:
        e_n = _component_hits(z_n, model.means.values)
        log_trans = nn.log_softmax(model.trans_logits.values, axis=-1)
        with np.errstate(divide="ignore"):
            log_p, _ = kernels.hmm_pair_lse(e_t, e_n, log_trans, model.log_weights, batch.a)
    return LossTerms(pred, float(np.mean(-log_p)), beta)


def train_vib(dataset, config: VibConfig, rng=None, log_every=0):
    """Jointly fit encoder, decoder and prior by Adam on minibatches of ``vib_loss``.

    Returns the trained model; ``model.loss_trace`` holds one row
    (total, prediction, regularizer) per step, with the warmed-up beta.
    """
    if len(dataset) == 0:
        raise UsageError("dataset is empty")
    if config.idealized_mode:
        raise ConfigurationError("idealized mode is an analysis mode and cannot be trained")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    model = VibModel(dataset.s_t.shape[1], dataset.n_actions, dataset.y.shape[1], config, rng)
    model.decoder.b.values[...] = dataset.y.mean(axis=0)
    g, pred, reg, _ = model.loss_graph()
    opt = nn.Adam(model.parameters(), lr=config.lr)
    n = len(dataset)
    bs = min(config.batch_size, n)
    trace = np.zeros((config.steps, 3))
    reseed = config.reseed_step
    for t in range(config.steps):
        if t == reseed:
            rows = rng.choice(n, size=min(n, config.seed_sample), replace=False)
            z = model.encode(dataset.s_t[rows]).mean
            model.means.values[...] = kmeans_pp_seeds(z, config.K, rng)
        idx = rng.integers(0, n, size=bs)
        batch = dataset.subset(idx)
        beta = config.beta_at(t)
        g.forward(_feed(model, batch, _draw_noise(model, bs, rng)))
        p, r = float(pred.value), float(reg.value)
        total = p + beta * r
        if not np.isfinite(total):
            model.loss_trace = trace[:t]
            raise TrainingError(f"non-finite VIB loss at step {t} (batch index {t})")
        trace[t] = (total, p, r)
        opt.zero_grad()
        g.backward({pred: 1.0, reg: beta})
        opt.step()
        if log_every and t % log_every == 0:
            print(f"step {t}: total={total:.4f} pred={p:.4f} reg={r:.4f}")
    model.loss_trace = trace
    return model


def kmeans_pp_seeds(points, k, rng):
    """k-means++ seeding: each new center is drawn with probability
    proportional to squared distance from the nearest chosen center."""
    points = np.asarray(points, dtype=np.float64)
    centers = [points[rng.integers(len(points))]]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(points))
        else:
            idx = rng.choice(len(points), p=d2 / total)
        centers.append(points[idx])
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return np.array(centers)


# --- idealized analysis ----------------------------------------------------------


def idealized_loss(assignment, q_table, transition_table, dataset, beta, log_rho=None):
    """Per-sample loss of a deterministic tabular abstraction.

    ``assignment`` maps ground state ids to components, ``q_table`` is
    (K, n_outputs) and ``transition_table`` (A, K, K).  Returns the dataset
    mean of ||y - q_table[c_t]||^2 - beta (log T^a[c_t, c_next] + log rho);
    ``+inf`` if any visited component transition has probability zero.
    """
    assignment = np.asarray(assignment, dtype=np.int64)
    q_table = np.asarray(q_table, dtype=np.float64)
    T = np.asarray(transition_table, dtype=np.float64)
    K = T.shape[1]
    if log_rho is None:
        log_rho = -np.log(K)
    if np.any(dataset.s_id < 0):
        raise UsageError("idealized_loss needs ground state ids in the dataset")
    c_t = assignment[dataset.s_id]
    c_n = assignment[dataset.s_next_id]
    err = np.sum((dataset.y - q_table[c_t]) ** 2, axis=1)
    p = T[dataset.a, c_t, c_n]
    if np.any(p <= 0):
        return float("inf")
    return float(np.mean(err - beta * (np.log(p) + log_rho)))


def fit_tables(assignment, dataset, K, n_actions):
    """Best tabular decoder (per-component mean of y) and empirical T for an assignment.

    These minimize the prediction and transition terms of
    :func:`idealized_loss` for a fixed assignment.
    """
    assignment = np.asarray(assignment, dtype=np.int64)
    c_t = assignment[dataset.s_id]
    c_n = assignment[dataset.s_next_id]
    q = np.zeros((K, dataset.y.shape[1]))
    counts = np.bincount(c_t, minlength=K)
    np.add.at(q, c_t, dataset.y)
    q[counts > 0] /= counts[counts > 0, None]
    T = np.zeros((n_actions, K, K))
    np.add.at(T, (dataset.a, c_t, c_n), 1.0)
    rows = T.sum(axis=2, keepdims=True)
    T = np.where(rows > 0, T / np.where(rows > 0, rows, 1.0), 1.0 / K)
    return q, T
