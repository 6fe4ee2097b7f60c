"""Multi-view VAE with product-of-experts fusion.

Each view m has an encoder pair (mean net, log-variance net) mapping
``d_m -> D`` and a sigmoid decoder mapping ``D -> d_m``. Per-view
posteriors are fused by a product of diagonal Gaussians, one
reparameterized sample of the fused posterior feeds every decoder, and
the loss is Bernoulli cross-entropy plus the closed-form KL of the fused
posterior to N(0, I), both averaged over the batch.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import MultiViewDataset
from .gaussians import LOG_VAR_MAX, LOG_VAR_MIN, DiagGaussian, fuse_arrays, poe_fuse
from .neuralnet import (
    CKPT_MAGIC,
    MlpParams,
    MlpSpec,
    OptimizerState,
    adam_step,
    backward,
    forward,
    init_params,
    read_params,
    write_params,
)

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-7


class TrainingError(RuntimeError):
    def __init__(self, epoch, batch, message):
        super().__init__(f"epoch {epoch}, batch {batch}: {message}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class MvvaeConfig:
    view_dims: list
    latent_dim: int = 8
    encoder_hidden: list = field(default_factory=lambda: [32])
    decoder_hidden: list = field(default_factory=lambda: [32])
    kl_weight: float = 1.0
    hidden_activation: str = "relu"
    n_samples: int = 1
    include_prior_expert: bool = False

    def __post_init__(self):
        self.view_dims = [int(d) for d in self.view_dims]
        self.encoder_hidden = [int(h) for h in self.encoder_hidden]
        self.decoder_hidden = [int(h) for h in self.decoder_hidden]
        if len(self.view_dims) < 1 or any(d < 1 for d in self.view_dims):
            raise ValueError(f"need at least one view with positive dimension, got {self.view_dims}")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")

    @classmethod
    def from_grid(cls, view_dims, n_layers: int, latent_dim: int, hidden: int, **kw) -> "MvvaeConfig":
        """Uniform-width nets with ``n_layers`` affine layers each."""
        widths = [hidden] * (n_layers - 1)
        return cls(view_dims, latent_dim, widths, list(widths), **kw)

    @property
    def n_views(self) -> int:
        return len(self.view_dims)


@dataclass
class MvvaeModel:
    config: MvvaeConfig
    enc_mu: list
    enc_logvar: list
    dec: list

    def nets(self) -> list:
        """All networks in canonical order: per view (enc_mu, enc_logvar, dec)."""
        out = []
        for m in range(self.config.n_views):
            out.extend((self.enc_mu[m], self.enc_logvar[m], self.dec[m]))
        return out

    def arrays(self) -> list:
        return [a for net in self.nets() for a in net.arrays()]

    def with_arrays(self, arrays) -> "MvvaeModel":
        arrays = list(arrays)
        nets, pos = [], 0
        for net in self.nets():
            k = 2 * net.spec.n_layers
            nets.append(MlpParams.from_arrays(net.spec, arrays[pos:pos + k]))
            pos += k
        return MvvaeModel(self.config, nets[0::3], nets[1::3], nets[2::3])

    def copy(self) -> "MvvaeModel":
        return self.with_arrays([a.copy() for a in self.arrays()])


def _specs(cfg: MvvaeConfig, m: int):
    d = cfg.view_dims[m]
    act = cfg.hidden_activation
    enc = MlpSpec((d, *cfg.encoder_hidden, cfg.latent_dim), act, "identity")
    dec = MlpSpec((cfg.latent_dim, *cfg.decoder_hidden, d), act, "sigmoid")
    return enc, dec


def init_model(cfg: MvvaeConfig, seed) -> MvvaeModel:
    seeds = np.random.SeedSequence(seed).spawn(3 * cfg.n_views)
    enc_mu, enc_lv, dec = [], [], []
    for m in range(cfg.n_views):
        enc_spec, dec_spec = _specs(cfg, m)
        enc_mu.append(init_params(enc_spec, seeds[3 * m]))
        enc_lv.append(init_params(enc_spec, seeds[3 * m + 1]))
        dec.append(init_params(dec_spec, seeds[3 * m + 2]))
    return MvvaeModel(cfg, enc_mu, enc_lv, dec)


def _check_unit_range(x, view):
    bad = (x < 0.0) | (x > 1.0) | ~np.isfinite(x)
    if bad.any():
        col = int(np.argwhere(bad)[0][1])
        raise ValueError(f"view {view}: column {col} has values outside [0, 1]")


def encode_view(model: MvvaeModel, m: int, x) -> list:
    """Per-subject posterior of view ``m`` as a list of DiagGaussian."""
    if not 0 <= m < model.config.n_views:
        raise IndexError(f"view index {m} out of range")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _check_unit_range(x, m)
    mu, _ = forward(model.enc_mu[m], x)
    lv, _ = forward(model.enc_logvar[m], x)
    return [DiagGaussian.clamped(a, b) for a, b in zip(mu, lv)]


def fuse_posterior(experts, available_mask) -> DiagGaussian:
    """Fuse ``(view index, DiagGaussian)`` pairs over the available views."""
    available_mask = list(available_mask)
    chosen = [g for m, g in experts if available_mask[m]]
    if not chosen:
        raise ValueError("all views are missing; cannot form a posterior")
    return poe_fuse(chosen)


def decode_view(model: MvvaeModel, m: int, z) -> np.ndarray:
    if not 0 <= m < model.config.n_views:
        raise IndexError(f"view index {m} out of range")
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != model.config.latent_dim:
        raise ValueError(f"latent has {z.shape[1]} columns, model expects {model.config.latent_dim}")
    return forward(model.dec[m], z)[0]


def _batch_inputs(model, views, mask):
    cfg = model.config
    views = [np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in views]
    if len(views) != cfg.n_views:
        raise ValueError(f"expected {cfg.n_views} views, got {len(views)}")
    n = views[0].shape[0]
    if mask is None:
        mask = np.ones((n, cfg.n_views), dtype=bool)
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    if mask.shape != (n, cfg.n_views):
        raise ValueError(f"mask must be ({n}, {cfg.n_views}), got {mask.shape}")
    if not mask.any(axis=1).all():
        bad = int(np.argmin(mask.any(axis=1)))
        raise ValueError(f"subject row {bad} has no available views")
    for m, (x, d) in enumerate(zip(views, cfg.view_dims)):
        if x.shape != (n, d):
            raise ValueError(f"view {m}: expected shape ({n}, {d}), got {x.shape}")
        _check_unit_range(x[mask[:, m]], m)
    return views, mask


def _encode_all(model, views, mask):
    """Encode present rows of every view; returns stacked arrays and tapes."""
    cfg = model.config
    n = mask.shape[0]
    M, D = cfg.n_views, cfg.latent_dim
    means = np.zeros((M, n, D))
    raw_lv = np.zeros((M, n, D))
    tapes = []
    for m in range(M):
        rows = np.flatnonzero(mask[:, m])
        if rows.size == 0:
            tapes.append(None)
            continue
        mu, t_mu = forward(model.enc_mu[m], views[m][rows])
        lv, t_lv = forward(model.enc_logvar[m], views[m][rows])
        means[m, rows] = mu
        raw_lv[m, rows] = lv
        tapes.append((rows, t_mu, t_lv))
    expert_mask = mask.T[:, :, None]
    if cfg.include_prior_expert:
        means = np.concatenate([means, np.zeros((1, n, D))])
        raw_lv = np.concatenate([raw_lv, np.zeros((1, n, D))])
        expert_mask = np.concatenate([expert_mask, np.ones((1, n, 1), dtype=bool)])
    return means, raw_lv, expert_mask, tapes


def fused_params(model: MvvaeModel, views, mask=None):
    """Fused posterior mean and log-variance for a batch, shapes (N, D)."""
    views, mask = _batch_inputs(model, views, mask)
    means, raw_lv, emask, _ = _encode_all(model, views, mask)
    lv = np.clip(raw_lv, LOG_VAR_MIN, LOG_VAR_MAX)
    return fuse_arrays(means, lv, emask)


def extract_latent(model: MvvaeModel, views, mask=None) -> np.ndarray:
    """Fused posterior mean. 1-D views give a single latent vector."""
    single = np.asarray(views[0]).ndim == 1
    if single and mask is not None:
        mask = np.atleast_2d(mask)
    mu, _ = fused_params(model, views, mask)
    return mu[0] if single else mu


def _bce_terms(x, xhat):
    lx = np.log(np.maximum(xhat, LOG_CLAMP))
    l1x = np.log(np.maximum(1.0 - xhat, LOG_CLAMP))
    loss = -np.sum(x * lx + (1.0 - x) * l1x)
    grad = -(np.where(xhat > LOG_CLAMP, x / np.maximum(xhat, LOG_CLAMP), 0.0)
             - np.where(1.0 - xhat > LOG_CLAMP, (1.0 - x) / np.maximum(1.0 - xhat, LOG_CLAMP), 0.0))
    return loss, grad


def elbo_loss(model: MvvaeModel, views, mask=None, eps=None, grads: bool = False):
    """Negative ELBO on a batch: ``(total, recon, kl)`` per subject.

    ``eps`` is the standard-normal noise, shaped ``(N, D)`` or, for
    ``n_samples > 1``, ``(S, N, D)``. With ``grads=True`` a fourth item is
    returned: gradients of ``total`` aligned with ``model.arrays()``.
    """
    cfg = model.config
    views, mask = _batch_inputs(model, views, mask)
    n, D = mask.shape[0], cfg.latent_dim
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim == 2:
        eps = eps[None]
    if eps.shape[1:] != (n, D):
        raise ValueError(f"eps must be shaped ({n}, {D}) or (S, {n}, {D}), got {eps.shape}")
    n_s = eps.shape[0]

    means, raw_lv, emask, enc_tapes = _encode_all(model, views, mask)
    lv = np.clip(raw_lv, LOG_VAR_MIN, LOG_VAR_MAX)
    mu_z, lv_z = fuse_arrays(means, lv, emask)
    std_z = np.exp(0.5 * lv_z)

    recon = 0.0
    d_mu_z = np.zeros_like(mu_z)
    d_lv_z = np.zeros_like(lv_z)
    dec_grads = [None] * cfg.n_views
    for s in range(n_s):
        z = mu_z + std_z * eps[s]
        dz = np.zeros_like(z)
        for m in range(cfg.n_views):
            rows = np.flatnonzero(mask[:, m])
            if rows.size == 0:
                continue
            x = views[m][rows]
            xhat, tape = forward(model.dec[m], z[rows])
            loss_m, g_xhat = _bce_terms(x, xhat)
            recon += loss_m / (n * n_s)
            if grads:
                pg, gz = backward(model.dec[m], tape, g_xhat / (n * n_s))
                dec_grads[m] = pg if dec_grads[m] is None else _add_params(dec_grads[m], pg)
                dz[rows] += gz
        if grads:
            d_mu_z += dz
            d_lv_z += dz * eps[s] * 0.5 * std_z

    var_z = np.exp(lv_z)
    kl = 0.5 * np.sum(mu_z**2 + var_z - lv_z - 1.0) / n
    total = recon + cfg.kl_weight * kl
    if not grads:
        return total, recon, kl

    d_mu_z += cfg.kl_weight * mu_z / n
    d_lv_z += cfg.kl_weight * 0.5 * (var_z - 1.0) / n

    # d mu_z/d mu_m = w_m ; d mu_z/d lv_m = w_m (mu_z - mu_m) ; d lv_z/d lv_m = w_m
    neg = np.where(emask, -lv, -np.inf)
    w = np.exp(neg - np.max(neg, axis=0))
    w /= np.sum(w, axis=0)
    d_means = w * d_mu_z
    d_lv = w * (d_lv_z + np.where(w > 0, mu_z - means, 0.0) * d_mu_z)
    d_lv *= (raw_lv >= LOG_VAR_MIN) & (raw_lv <= LOG_VAR_MAX)

    out = []
    for m in range(cfg.n_views):
        if enc_tapes[m] is None:
            g_mu = model.enc_mu[m].zeros_like()
            g_lv = model.enc_logvar[m].zeros_like()
        else:
            rows, t_mu, t_lv = enc_tapes[m]
            g_mu, _ = backward(model.enc_mu[m], t_mu, d_means[m, rows])
            g_lv, _ = backward(model.enc_logvar[m], t_lv, d_lv[m, rows])
        g_dec = dec_grads[m] if dec_grads[m] is not None else model.dec[m].zeros_like()
        out.extend(g_mu.arrays())
        out.extend(g_lv.arrays())
        out.extend(g_dec.arrays())
    return total, recon, kl, out


def _add_params(a: MlpParams, b: MlpParams) -> MlpParams:
    return MlpParams.from_arrays(a.spec, [x + y for x, y in zip(a.arrays(), b.arrays())])


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or not (0 < self.beta1 < 1 and 0 < self.beta2 < 1) or self.eps <= 0:
            raise ValueError("invalid optimizer hyperparameters")


@dataclass
class TrainHistory:
    total: list = field(default_factory=list)
    recon: list = field(default_factory=list)
    kl: list = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,total,recon,kl"]
        for i, row in enumerate(zip(self.total, self.recon, self.kl), start=1):
            lines.append(f"{i}," + ",".join(repr(v) for v in row))
        return "\n".join(lines) + "\n"


def train(model: MvvaeModel, train_set, cfg: TrainConfig, views=None):
    """Minibatch Adam on the negative ELBO.

    ``train_set`` is a :class:`MultiViewDataset` (features already scaled
    to [0, 1]) or a ``(views, presence)`` pair. Shuffling and noise draws
    come from ``cfg.seed``; the input model is not modified.
    """
    if isinstance(train_set, MultiViewDataset):
        views, mask = train_set.view_arrays(), train_set.presence
    else:
        views, mask = train_set
    views, mask = _batch_inputs(model, views, mask)
    n = mask.shape[0]
    if cfg.batch_size > n:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds training-set size {n}")
    views = [np.where(mask[:, [m]], v, 0.0) for m, v in enumerate(views)]

    rng = np.random.default_rng(cfg.seed)
    arrays = [a.copy() for a in model.arrays()]
    state = OptimizerState.for_arrays(arrays, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    history = TrainHistory()
    D, S = model.config.latent_dim, model.config.n_samples
    current = model.with_arrays(arrays)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        sums = np.zeros(3)
        for b, start in enumerate(range(0, n, cfg.batch_size), start=1):
            idx = order[start:start + cfg.batch_size]
            eps = rng.standard_normal((S, idx.size, D))
            total, recon, kl, g = elbo_loss(current, [v[idx] for v in views], mask[idx], eps, grads=True)
            if not np.isfinite(total):
                raise TrainingError(epoch, b, f"non-finite loss {total}")
            try:
                arrays, state = adam_step(arrays, g, state)
            except FloatingPointError as exc:
                raise TrainingError(epoch, b, str(exc)) from exc
            current = model.with_arrays(arrays)
            sums += np.array([total, recon, kl]) * idx.size
        sums /= n
        history.total.append(float(sums[0]))
        history.recon.append(float(sums[1]))
        history.kl.append(float(sums[2]))
        logger.debug("epoch=%d total=%.6g recon=%.6g kl=%.6g", epoch, *sums)
    return current, history


def save_model(path, model: MvvaeModel) -> None:
    with open(path, "w") as fh:
        fh.write(dump_model(model))


def dump_model(model: MvvaeModel) -> str:
    buf = io.StringIO()
    buf.write(CKPT_MAGIC + "\n")
    buf.write("config " + json.dumps(asdict(model.config), sort_keys=True) + "\n")
    for m in range(model.config.n_views):
        write_params(buf, model.enc_mu[m], f"enc_mu_{m}")
        write_params(buf, model.enc_logvar[m], f"enc_logvar_{m}")
        write_params(buf, model.dec[m], f"dec_{m}")
    return buf.getvalue()


def load_model(path) -> MvvaeModel:
    with open(path) as fh:
        return parse_model(fh.read())


def parse_model(text: str) -> MvvaeModel:
    fh = io.StringIO(text)
    magic = fh.readline().strip()
    if magic != CKPT_MAGIC:
        raise ValueError(f"not a model checkpoint (header {magic!r})")
    line = fh.readline()
    if not line.startswith("config "):
        raise ValueError("checkpoint is missing its config header")
    cfg = MvvaeConfig(**json.loads(line[len("config "):]))
    nets = {}
    for _ in range(3 * cfg.n_views):
        name, params = read_params(fh)
        nets[name] = params
    M = range(cfg.n_views)
    model = MvvaeModel(
        cfg,
        [nets[f"enc_mu_{m}"] for m in M],
        [nets[f"enc_logvar_{m}"] for m in M],
        [nets[f"dec_{m}"] for m in M],
    )
    for m in M:
        enc_spec, dec_spec = _specs(cfg, m)
        if model.enc_mu[m].spec != enc_spec or model.enc_logvar[m].spec != enc_spec or model.dec[m].spec != dec_spec:
            raise ValueError(f"checkpoint networks for view {m} do not match the recorded config")
    return model
